//! Sentence retrieval from multi-electrode neural signals.
//!
//! The pipeline: superlet time-frequency transforms of fixed-length signal
//! windows, masking augmentations, a small convolutional encoder trained with
//! InfoNCE against frozen 512-d sentence embeddings, and zero-shot sentence
//! retrieval evaluated with Recall@k / MRR plus t-test statistics.

pub mod augment;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod signal_io;
pub mod superlet;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
