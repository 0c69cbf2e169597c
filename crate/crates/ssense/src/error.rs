use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline.
///
/// Variants are grouped into two categories for the CLI exit-code contract:
/// validation errors (bad inputs, bad config) map to exit code 1, runtime
/// errors (I/O failures, numerical breakdown) map to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("signal blob {path}: expected {expected} bytes ({electrodes} electrodes x {samples} samples x 4), found {actual}")]
    BlobSizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
        electrodes: usize,
        samples: usize,
    },

    #[error("non-finite sample at electrode {electrode}, sample {sample}")]
    NonFiniteSample { electrode: usize, sample: usize },

    #[error("transcript {path} line {line}: {reason}")]
    Transcript {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("sentence {index}: window [{start_s:.3}, {end_s:.3}] s exceeds recording bounds [0, {duration_s:.3}] s")]
    WindowOutOfBounds {
        index: usize,
        start_s: f64,
        end_s: f64,
        duration_s: f64,
    },

    #[error("sentence {index}: window of {valid_len} samples exceeds target length {target_len}")]
    WindowTooLong {
        index: usize,
        valid_len: usize,
        target_len: usize,
    },

    #[error("split requires at least 3 items, got {0}")]
    SplitTooSmall(usize),

    #[error("frequency {freq_hz} Hz is at or above Nyquist ({nyquist_hz} Hz)")]
    FrequencyAboveNyquist { freq_hz: f64, nyquist_hz: f64 },

    #[error("invalid superlet config: {0}")]
    SuperletConfig(String),

    #[error("empty segment")]
    EmptySegment,

    #[error("transform failed for pair {pair}, electrode {electrode}: {source}")]
    BatchTransform {
        pair: usize,
        electrode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid encoder spec: {0}")]
    EncoderSpec(String),

    #[error("non-finite activation in {layer}")]
    NonFiniteActivation { layer: String },

    #[error("degenerate embedding: pooled vector norm {norm:e} below 1e-12")]
    DegenerateEmbedding { norm: f64 },

    #[error("parameter shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("embedding dimension must be 512, file declares {0}")]
    EmbeddingDim(u32),

    #[error("embedding count mismatch: {expected} sentences but {actual} vectors")]
    EmbeddingCount { expected: usize, actual: usize },

    #[error("cannot normalize zero embedding vector at index {0}")]
    ZeroEmbedding(usize),

    #[error("remote embedding service: {0}")]
    Remote(String),

    #[error("no frozen embedding for sentence: {0:?}")]
    MissingEmbedding(String),

    #[error("non-finite similarity at ({row}, {col})")]
    NonFiniteSimilarity { row: usize, col: usize },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("truth index {index} out of range for {n_candidates} candidates")]
    TruthOutOfRange { index: usize, n_candidates: usize },

    #[error("empty rank list")]
    EmptyRanks,

    #[error("t-test needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("paired t-test needs equal lengths, got {0} and {1}")]
    UnequalLengths(usize, usize),

    #[error("degenerate t-test: zero sample variance (t undefined)")]
    ZeroVariance,

    #[error("checkpoint digest mismatch: file built for spec {file_digest}, current spec is {spec_digest}")]
    DigestMismatch {
        file_digest: String,
        spec_digest: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("workdir {0} is locked by another run (remove .lock to override)")]
    WorkdirLocked(PathBuf),
}

impl Error {
    /// Exit code for the CLI: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            MissingFile(_)
            | Manifest { .. }
            | BlobSizeMismatch { .. }
            | NonFiniteSample { .. }
            | Transcript { .. }
            | WindowOutOfBounds { .. }
            | WindowTooLong { .. }
            | SplitTooSmall(_)
            | FrequencyAboveNyquist { .. }
            | SuperletConfig(_)
            | EmptySegment
            | EncoderSpec(_)
            | Format { .. }
            | EmbeddingDim(_)
            | EmbeddingCount { .. }
            | ZeroEmbedding(_)
            | MissingEmbedding(_)
            | EmptySplit(_)
            | TruthOutOfRange { .. }
            | EmptyRanks
            | TooFewSamples(_)
            | UnequalLengths(_, _)
            | DigestMismatch { .. }
            | Config(_)
            | WorkdirLocked(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
