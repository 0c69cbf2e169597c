//! Training-time masking augmentations on spectrogram batches.
//!
//! Time-frequency masking zeroes `floor(r_f * F)` whole frequency rows and
//! `floor(r_t * T)` whole time columns per batch item, shared across that
//! item's electrodes. Electrode masking zeroes `floor(r * E)` whole electrode
//! slices per item. Indices are drawn without replacement, so the zeroed
//! counts are exact.
//!
//! Each (item, mask kind) pair draws from its own ChaCha substream, so the
//! two masks commute and items are independent regardless of batch order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::superlet::SpectroBatch;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Frequency mask ratio in [0, 1].
    pub r_f: f64,
    /// Time mask ratio in [0, 1].
    pub r_t: f64,
    /// Electrode mask ratio in [0, 1].
    pub r_e: f64,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            r_f: 0.0,
            r_t: 0.0,
            r_e: 0.0,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn is_noop(&self) -> bool {
        self.r_f <= 0.0 && self.r_t <= 0.0 && self.r_e <= 0.0
    }
}

// Substream salts; one ChaCha stream per (item, mask kind).
const STREAM_FREQ: u64 = 1;
const STREAM_TIME: u64 = 2;
const STREAM_ELECTRODE: u64 = 3;

fn item_rng(seed: u64, item: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt << 32 | item as u64);
    rng
}

fn sample_indices(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, dim, count).into_vec()
}

/// Algorithm-style time-frequency masking: per item, zero `floor(r_f * F)`
/// frequency rows across every electrode, then `floor(r_t * T)` time columns.
pub fn tf_mask(x: &mut SpectroBatch, r_f: f64, r_t: f64, seed: u64) {
    let (b, _, _, f, t) = x.values.dim();
    for bi in 0..b {
        if r_f > 0.0 {
            let m_f = (r_f * f as f64).floor() as usize;
            let rows = sample_indices(&mut item_rng(seed, bi, STREAM_FREQ), f, m_f);
            for fi in rows {
                x.values
                    .slice_mut(ndarray::s![bi, .., .., fi, ..])
                    .fill(0.0);
            }
        }
        if r_t > 0.0 {
            let m_t = (r_t * t as f64).floor() as usize;
            let cols = sample_indices(&mut item_rng(seed, bi, STREAM_TIME), t, m_t);
            for ti in cols {
                x.values
                    .slice_mut(ndarray::s![bi, .., .., .., ti])
                    .fill(0.0);
            }
        }
    }
}

/// Per item, zero exactly `floor(r * E)` whole electrode slices.
pub fn electrode_mask(x: &mut SpectroBatch, r: f64, seed: u64) {
    let (b, e, _, _, _) = x.values.dim();
    for bi in 0..b {
        let m = (r * e as f64).floor() as usize;
        if m == 0 {
            continue;
        }
        let slices = sample_indices(&mut item_rng(seed, bi, STREAM_ELECTRODE), e, m);
        for ei in slices {
            x.values
                .slice_mut(ndarray::s![bi, ei, .., .., ..])
                .fill(0.0);
        }
    }
}

/// Apply both masks per the config (electrode slices first; the order does
/// not change the zero-set because the index draws are independent streams).
pub fn apply_masks(x: &mut SpectroBatch, cfg: &MaskConfig) {
    if cfg.r_e > 0.0 {
        electrode_mask(x, cfg.r_e, cfg.seed);
    }
    if cfg.r_f > 0.0 || cfg.r_t > 0.0 {
        tf_mask(x, cfg.r_f, cfg.r_t, cfg.seed);
    }
}
