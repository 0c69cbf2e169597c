//! Morlet scalograms and adaptive superlet time-frequency transforms.
//!
//! The superlet estimate at each frequency is the geometric mean of several
//! Morlet scalograms with cycle counts `c_i = i * c1` (multiplicative
//! superlet), with the number of factors growing linearly from `order_min`
//! at the lowest analysis frequency to `order_max` at the highest.
//!
//! Convolution is linear (zero-extension at the edges) via FFT, with "same"
//! alignment, and the time axis is decimated by `time_decimation`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array5};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::AlignedPair;

/// Geometric-mean log floor; magnitudes below this are clamped inside the log.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperletConfig {
    /// Strictly increasing analysis frequencies, all below Nyquist.
    pub freqs_hz: Vec<f64>,
    /// Cycle count of the order-1 wavelet.
    pub base_cycles: f64,
    pub order_min: usize,
    pub order_max: usize,
    /// Samples per output time column.
    pub time_decimation: usize,
}

impl SuperletConfig {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let fail = |m: String| Err(Error::SuperletConfig(m));
        if self.freqs_hz.is_empty() {
            return fail("frequency grid is empty".into());
        }
        for w in self.freqs_hz.windows(2) {
            if !(w[1] > w[0]) {
                return fail(format!(
                    "frequencies must be strictly increasing ({} then {})",
                    w[0], w[1]
                ));
            }
        }
        let nyquist = sample_rate_hz / 2.0;
        for &f in &self.freqs_hz {
            if !(f > 0.0) {
                return fail(format!("frequency {f} must be positive"));
            }
            if f >= nyquist {
                return Err(Error::FrequencyAboveNyquist {
                    freq_hz: f,
                    nyquist_hz: nyquist,
                });
            }
        }
        if !(self.base_cycles >= 1.0) {
            return fail(format!("base_cycles must be >= 1, got {}", self.base_cycles));
        }
        if self.order_min < 1 || self.order_min > self.order_max {
            return fail(format!(
                "need 1 <= order_min <= order_max, got {}..{}",
                self.order_min, self.order_max
            ));
        }
        if self.time_decimation < 1 {
            return fail("time_decimation must be >= 1".into());
        }
        Ok(())
    }

    /// Adaptive order schedule: linear in frequency, rounded half up.
    pub fn order_at(&self, f: f64) -> usize {
        let f_min = *self.freqs_hz.first().unwrap();
        let f_max = *self.freqs_hz.last().unwrap();
        if self.order_max == self.order_min || f_max == f_min {
            return self.order_min;
        }
        let span = (self.order_max - self.order_min) as f64;
        let x = span * (f - f_min) / (f_max - f_min);
        self.order_min + (x + 0.5).floor() as usize
    }

    /// Canonical provenance string hashed into output files.
    pub fn digest_string(&self) -> String {
        let freqs: Vec<String> = self.freqs_hz.iter().map(|f| format!("{f:.9}")).collect();
        format!(
            "freqs=[{}];c1={:.9};o={}..{};d={}",
            freqs.join(","),
            self.base_cycles,
            self.order_min,
            self.order_max,
            self.time_decimation
        )
    }
}

/// F x T magnitude plane for one signal.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub freqs_hz: Vec<f64>,
    /// Samples per output column.
    pub hop: usize,
}

/// B x E x C x F x T batch of spectrogram magnitudes, C = 1.
#[derive(Debug, Clone)]
pub struct SpectroBatch {
    pub values: Array5<f64>,
    pub freqs_hz: Vec<f64>,
    pub hop: usize,
    pub config_digest: String,
}

/// Complex Morlet wavelet: unit L2 norm, zero-mean corrected, Gaussian
/// envelope with SD `cycles / (2*pi*f)` seconds, truncated at +-3 SD.
pub fn morlet_kernel(f: f64, cycles: f64, sr: f64) -> Result<Vec<Complex<f64>>> {
    if f >= sr / 2.0 {
        return Err(Error::FrequencyAboveNyquist {
            freq_hz: f,
            nyquist_hz: sr / 2.0,
        });
    }
    let sigma_t = cycles / (2.0 * std::f64::consts::PI * f);
    let half = (3.0 * sigma_t * sr).ceil() as usize;
    let n = 2 * half + 1;
    let mut kernel = Vec::with_capacity(n);
    for k in 0..n {
        let t = (k as f64 - half as f64) / sr;
        let envelope = (-t * t / (2.0 * sigma_t * sigma_t)).exp();
        let phase = 2.0 * std::f64::consts::PI * f * t;
        kernel.push(Complex::new(phase.cos(), phase.sin()) * envelope);
    }
    let mean = kernel.iter().sum::<Complex<f64>>() / n as f64;
    for v in &mut kernel {
        *v -= mean;
    }
    let norm = kernel.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    for v in &mut kernel {
        *v /= norm;
    }
    Ok(kernel)
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// One kernel's frequency-domain representation inside a fixed-size plan.
struct KernelSpectrum {
    spectrum: Vec<Complex<f64>>,
    half: usize,
}

/// FFT convolution engine for a fixed segment length and kernel set.
struct ConvEngine {
    fft_len: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl ConvEngine {
    fn new(seg_len: usize, max_kernel_len: usize) -> Self {
        let fft_len = next_pow2(seg_len + max_kernel_len - 1);
        let mut planner = FftPlanner::new();
        ConvEngine {
            fft_len,
            fft: planner.plan_fft_forward(fft_len),
            ifft: planner.plan_fft_inverse(fft_len),
        }
    }

    fn kernel_spectrum(&self, kernel: &[Complex<f64>]) -> KernelSpectrum {
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        buf[..kernel.len()].copy_from_slice(kernel);
        self.fft.process(&mut buf);
        KernelSpectrum {
            spectrum: buf,
            half: (kernel.len() - 1) / 2,
        }
    }

    fn segment_spectrum(&self, segment: &[f64]) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for (dst, &src) in buf.iter_mut().zip(segment) {
            *dst = Complex::new(src, 0.0);
        }
        self.fft.process(&mut buf);
        buf
    }

    /// |same-aligned linear convolution| sampled every `d` input samples.
    fn conv_magnitudes(
        &self,
        seg_spectrum: &[Complex<f64>],
        kernel: &KernelSpectrum,
        seg_len: usize,
        d: usize,
    ) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = seg_spectrum
            .iter()
            .zip(&kernel.spectrum)
            .map(|(a, b)| a * b)
            .collect();
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        let t_cols = seg_len.div_ceil(d);
        (0..t_cols)
            .map(|t| (buf[t * d + kernel.half] * scale).norm())
            .collect()
    }
}

/// Morlet scalogram with an explicit per-frequency cycle count.
pub fn scalogram(
    segment: &[f64],
    cfg: &SuperletConfig,
    cycles_per_freq: &[f64],
    sample_rate_hz: f64,
) -> Result<Spectrogram> {
    cfg.validate(sample_rate_hz)?;
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    if cycles_per_freq.len() != cfg.freqs_hz.len() {
        return Err(Error::SuperletConfig(format!(
            "cycles_per_freq has {} entries for {} frequencies",
            cycles_per_freq.len(),
            cfg.freqs_hz.len()
        )));
    }
    let kernels: Vec<Vec<Complex<f64>>> = cfg
        .freqs_hz
        .iter()
        .zip(cycles_per_freq)
        .map(|(&f, &c)| morlet_kernel(f, c, sample_rate_hz))
        .collect::<Result<_>>()?;
    let max_len = kernels.iter().map(Vec::len).max().unwrap();
    let engine = ConvEngine::new(segment.len(), max_len);
    let seg_spec = engine.segment_spectrum(segment);
    let d = cfg.time_decimation;
    let t_cols = segment.len().div_ceil(d);
    let mut values = Array2::<f64>::zeros((cfg.freqs_hz.len(), t_cols));
    for (fi, kernel) in kernels.iter().enumerate() {
        let ks = engine.kernel_spectrum(kernel);
        let row = engine.conv_magnitudes(&seg_spec, &ks, segment.len(), d);
        values.row_mut(fi).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(Spectrogram {
        values,
        freqs_hz: cfg.freqs_hz.clone(),
        hop: d,
    })
}

/// Precomputed kernel spectra for repeated superlet transforms of
/// equal-length segments.
pub struct SuperletPlan {
    cfg: SuperletConfig,
    seg_len: usize,
    engine: ConvEngine,
    /// Per frequency: the order-1..o(f) kernel spectra.
    per_freq: Vec<Vec<KernelSpectrum>>,
}

impl SuperletPlan {
    pub fn new(cfg: &SuperletConfig, sample_rate_hz: f64, seg_len: usize) -> Result<Self> {
        cfg.validate(sample_rate_hz)?;
        if seg_len == 0 {
            return Err(Error::EmptySegment);
        }
        let mut kernels: Vec<Vec<Vec<Complex<f64>>>> = Vec::with_capacity(cfg.freqs_hz.len());
        for &f in &cfg.freqs_hz {
            let order = cfg.order_at(f);
            let ks: Vec<Vec<Complex<f64>>> = (1..=order)
                .map(|i| morlet_kernel(f, i as f64 * cfg.base_cycles, sample_rate_hz))
                .collect::<Result<_>>()?;
            kernels.push(ks);
        }
        let max_len = kernels
            .iter()
            .flat_map(|ks| ks.iter().map(Vec::len))
            .max()
            .unwrap();
        let engine = ConvEngine::new(seg_len, max_len);
        let per_freq = kernels
            .iter()
            .map(|ks| ks.iter().map(|k| engine.kernel_spectrum(k)).collect())
            .collect();
        Ok(SuperletPlan {
            cfg: cfg.clone(),
            seg_len,
            engine,
            per_freq,
        })
    }

    pub fn transform(&self, segment: &[f64]) -> Result<Spectrogram> {
        if segment.len() != self.seg_len {
            return Err(Error::SuperletConfig(format!(
                "segment length {} does not match plan length {}",
                segment.len(),
                self.seg_len
            )));
        }
        let d = self.cfg.time_decimation;
        let t_cols = self.seg_len.div_ceil(d);
        let seg_spec = self.engine.segment_spectrum(segment);
        let mut values = Array2::<f64>::zeros((self.cfg.freqs_hz.len(), t_cols));
        let mut log_sum = vec![0.0f64; t_cols];
        let mut any_zero = vec![false; t_cols];
        for (fi, kernels) in self.per_freq.iter().enumerate() {
            log_sum.fill(0.0);
            any_zero.fill(false);
            for ks in kernels {
                let row = self
                    .engine
                    .conv_magnitudes(&seg_spec, ks, self.seg_len, d);
                for (t, &m) in row.iter().enumerate() {
                    if m == 0.0 {
                        any_zero[t] = true;
                    } else {
                        log_sum[t] += m.max(LOG_FLOOR).ln();
                    }
                }
            }
            let inv_order = 1.0 / kernels.len() as f64;
            for t in 0..t_cols {
                values[[fi, t]] = if any_zero[t] {
                    0.0
                } else {
                    (log_sum[t] * inv_order).exp()
                };
            }
        }
        Ok(Spectrogram {
            values,
            freqs_hz: self.cfg.freqs_hz.clone(),
            hop: d,
        })
    }
}

/// Adaptive multiplicative superlet of one segment.
pub fn superlet_transform(
    segment: &[f64],
    cfg: &SuperletConfig,
    sample_rate_hz: f64,
) -> Result<Spectrogram> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    SuperletPlan::new(cfg, sample_rate_hz, segment.len())?.transform(segment)
}

/// Superlet-transform every (pair, electrode) slice into a B x E x 1 x F x T
/// batch. Slices are independent; failures carry (pair, electrode) context.
pub fn batch_transform(
    pairs: &[AlignedPair],
    cfg: &SuperletConfig,
    sample_rate_hz: f64,
) -> Result<SpectroBatch> {
    let b = pairs.len();
    let e = pairs.first().map(|p| p.segment.nrows()).unwrap_or(0);
    let seg_len = pairs
        .first()
        .map(|p| p.segment.ncols())
        .unwrap_or(crate::signal_io::TARGET_LEN);
    let plan = SuperletPlan::new(cfg, sample_rate_hz, seg_len)?;
    let t_cols = seg_len.div_ceil(cfg.time_decimation);
    let f = cfg.freqs_hz.len();
    let mut values = Array5::<f64>::zeros((b, e, 1, f, t_cols));
    let mut segment = vec![0.0f64; seg_len];
    for (bi, pair) in pairs.iter().enumerate() {
        for ei in 0..e {
            for (dst, &src) in segment.iter_mut().zip(pair.segment.row(ei)) {
                *dst = src as f64;
            }
            let spec = plan.transform(&segment).map_err(|err| Error::BatchTransform {
                pair: bi,
                electrode: ei,
                source: Box::new(err),
            })?;
            values
                .slice_mut(ndarray::s![bi, ei, 0, .., ..])
                .assign(&spec.values);
        }
    }
    Ok(SpectroBatch {
        values,
        freqs_hz: cfg.freqs_hz.clone(),
        hop: cfg.time_decimation,
        config_digest: crate::config::digest_hex(&cfg.digest_string()),
    })
}

/// Standardize each (b, e, c) plane to zero mean and unit SD (population SD,
/// 1e-6 guard). Applied once, before the encoder and before any masking.
pub fn standardize_batch(batch: &mut SpectroBatch) {
    let (b, e, c, _, _) = batch.values.dim();
    for bi in 0..b {
        for ei in 0..e {
            for ci in 0..c {
                let mut plane = batch.values.slice_mut(ndarray::s![bi, ei, ci, .., ..]);
                let n = plane.len() as f64;
                let mean = plane.sum() / n;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let denom = var.sqrt() + 1e-6;
                plane.mapv_inplace(|v| (v - mean) / denom);
            }
        }
    }
}

const BATCH_MAGIC: &[u8; 4] = b"SSEN";
const BATCH_VERSION: u32 = 1;

/// Write a SpectroBatch: magic "SSEN", version, dims, f32le row-major values,
/// then the config digest for provenance.
pub fn write_batch(path: &Path, batch: &SpectroBatch, sample_rate_hz: f64) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|er| Error::io(path, er))?,
    );
    let io = |er: std::io::Error| Error::io(path, er);
    let (b, e, c, f, t) = batch.values.dim();
    w.write_all(BATCH_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(BATCH_VERSION).map_err(io)?;
    for dim in [b, e, c, f, t] {
        w.write_u32::<LittleEndian>(dim as u32).map_err(io)?;
    }
    for &v in batch.values.iter() {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    w.write_f64::<LittleEndian>(sample_rate_hz).map_err(io)?;
    w.write_u32::<LittleEndian>(batch.hop as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(batch.freqs_hz.len() as u32)
        .map_err(io)?;
    for &fq in &batch.freqs_hz {
        w.write_f64::<LittleEndian>(fq).map_err(io)?;
    }
    let digest = batch.config_digest.as_bytes();
    w.write_u32::<LittleEndian>(digest.len() as u32).map_err(io)?;
    w.write_all(digest).map_err(io)?;
    Ok(())
}

pub fn read_batch(path: &Path) -> Result<SpectroBatch> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|er| Error::io(path, er))?,
    );
    let io = |er: std::io::Error| Error::io(path, er);
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != BATCH_MAGIC {
        return Err(bad("bad magic, expected SSEN"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != BATCH_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    }
    let [b, e, c, f, t] = dims;
    let mut values = Array5::<f64>::zeros((b, e, c, f, t));
    for v in values.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(io)? as f64;
    }
    let _sr = r.read_f64::<LittleEndian>().map_err(io)?;
    let hop = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let nf = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if nf != f {
        return Err(bad("frequency list length does not match F dimension"));
    }
    let mut freqs_hz = Vec::with_capacity(nf);
    for _ in 0..nf {
        freqs_hz.push(r.read_f64::<LittleEndian>().map_err(io)?);
    }
    let dlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut dbuf = vec![0u8; dlen];
    r.read_exact(&mut dbuf).map_err(io)?;
    let config_digest =
        String::from_utf8(dbuf).map_err(|_| bad("invalid utf-8 in config digest"))?;
    Ok(SpectroBatch {
        values,
        freqs_hz,
        hop,
        config_digest,
    })
}

/// Log-spaced frequency grid, inclusive of both endpoints.
pub fn log_spaced_freqs(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![f_min];
    }
    let ratio = (f_max / f_min).ln() / (n - 1) as f64;
    (0..n).map(|i| f_min * (i as f64 * ratio).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(freqs: Vec<f64>, d: usize) -> SuperletConfig {
        SuperletConfig {
            freqs_hz: freqs,
            base_cycles: 3.0,
            order_min: 1,
            order_max: 1,
            time_decimation: d,
        }
    }

    /// Naive same-aligned linear convolution magnitude, the independent
    /// oracle for the FFT path.
    fn direct_conv_mag(segment: &[f64], kernel: &[Complex<f64>], t: usize) -> f64 {
        let half = (kernel.len() - 1) / 2;
        let mut acc = Complex::new(0.0, 0.0);
        for (ki, kv) in kernel.iter().enumerate() {
            // linear conv index: y[t + half] = sum_m seg[m] * k[t + half - m]
            let m = (t + half) as isize - ki as isize;
            if m >= 0 && (m as usize) < segment.len() {
                acc += segment[m as usize] * kv;
            }
        }
        acc.norm()
    }

    #[test]
    fn morlet_unit_norm_and_symmetry() {
        let k = morlet_kernel(10.0, 3.0, 2048.0).unwrap();
        let norm: f64 = k.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-9);
        let half = (k.len() - 1) / 2;
        let max_idx = (0..k.len()).max_by(|&a, &b| k[a].norm().total_cmp(&k[b].norm())).unwrap();
        assert_eq!(max_idx, half);
        for i in 0..half {
            assert_relative_eq!(k[i].norm(), k[k.len() - 1 - i].norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn morlet_support_grows_with_cycles() {
        let short = morlet_kernel(10.0, 3.0, 2048.0).unwrap();
        let long = morlet_kernel(10.0, 12.0, 2048.0).unwrap();
        assert!(short.len() < long.len());
    }

    #[test]
    fn morlet_rejects_nyquist() {
        assert!(matches!(
            morlet_kernel(1024.0, 3.0, 2048.0),
            Err(Error::FrequencyAboveNyquist { .. })
        ));
    }

    #[test]
    fn scalogram_zero_segment_is_zero() {
        let c = cfg(vec![10.0, 20.0, 40.0], 8);
        let seg = vec![0.0; 2048];
        let s = scalogram(&seg, &c, &[3.0, 3.0, 3.0], 2048.0).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalogram_tone_localizes() {
        let sr = 2048.0;
        let freqs: Vec<f64> = (1..=10).map(|i| i as f64 * 10.0).collect();
        let c = cfg(freqs, 16);
        let seg: Vec<f64> = (0..4096)
            .map(|n| (2.0 * std::f64::consts::PI * 40.0 * n as f64 / sr).sin())
            .collect();
        let s = scalogram(&seg, &c, &vec![3.0; 10], sr).unwrap();
        let t_cols = s.values.ncols();
        // interior columns, away from edge transients
        for t in t_cols / 4..3 * t_cols / 4 {
            let col = s.values.column(t);
            let argmax = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(s.freqs_hz[argmax], 40.0, "column {t}");
        }
    }

    #[test]
    fn scalogram_matches_direct_convolution() {
        let sr = 1024.0;
        let c = cfg(vec![12.0, 40.0], 1);
        let mut seg = vec![0.0f64; 1024];
        let mut state = 0x12345u64;
        for v in &mut seg {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
        let s = scalogram(&seg, &c, &[3.0, 3.0], sr).unwrap();
        for (fi, &f) in c.freqs_hz.iter().enumerate() {
            let kernel = morlet_kernel(f, 3.0, sr).unwrap();
            for &t in &[0usize, 100, 511, 900, 1023] {
                let expect = direct_conv_mag(&seg, &kernel, t);
                let got = s.values[[fi, t]];
                assert!(
                    (got - expect).abs() <= 1e-6 * expect.abs().max(1e-9),
                    "f={f} t={t}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn scalogram_homogeneity() {
        let sr = 1024.0;
        let c = cfg(vec![20.0], 4);
        let seg: Vec<f64> = (0..1024)
            .map(|n| (0.3 * n as f64).sin() + 0.2 * (0.11 * n as f64).cos())
            .collect();
        let scaled: Vec<f64> = seg.iter().map(|v| 2.5 * v).collect();
        let a = scalogram(&seg, &c, &[3.0], sr).unwrap();
        let b = scalogram(&scaled, &c, &[3.0], sr).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_relative_eq!(2.5 * x, *y, max_relative = 1e-9);
        }
    }

    #[test]
    fn superlet_order_one_equals_scalogram() {
        let sr = 1024.0;
        let c = cfg(vec![10.0, 25.0, 60.0], 8);
        let seg: Vec<f64> = (0..2048).map(|n| (0.13 * n as f64).sin()).collect();
        let sl = superlet_transform(&seg, &c, sr).unwrap();
        let sc = scalogram(&seg, &c, &[3.0, 3.0, 3.0], sr).unwrap();
        for (a, b) in sl.values.iter().zip(sc.values.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-9);
        }
    }

    #[test]
    fn superlet_geometric_mean_matches_product_oracle() {
        let sr = 1024.0;
        let mut c = cfg(vec![15.0, 30.0, 60.0], 8);
        c.order_min = 3;
        c.order_max = 3;
        let seg: Vec<f64> = (0..2048)
            .map(|n| (0.19 * n as f64).sin() + 0.4 * (0.05 * n as f64).cos())
            .collect();
        let sl = superlet_transform(&seg, &c, sr).unwrap();
        for (fi, &f) in c.freqs_hz.iter().enumerate() {
            let singles: Vec<Spectrogram> = (1..=3)
                .map(|i| {
                    scalogram(&seg, &cfg(vec![f], 8), &[i as f64 * 3.0], sr).unwrap()
                })
                .collect();
            for t in 0..sl.values.ncols() {
                let product: f64 = singles.iter().map(|s| s.values[[0, t]]).product();
                let expect = product.cbrt();
                assert_relative_eq!(sl.values[[fi, t]], expect, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn superlet_bracketed_by_member_scalograms() {
        let sr = 1024.0;
        let mut c = cfg(vec![12.0, 48.0], 16);
        c.order_min = 1;
        c.order_max = 4;
        let seg: Vec<f64> = (0..2048)
            .map(|n| (0.07 * n as f64).sin() * (1.0 + 0.3 * (0.002 * n as f64).cos()))
            .collect();
        let sl = superlet_transform(&seg, &c, sr).unwrap();
        for (fi, &f) in c.freqs_hz.iter().enumerate() {
            let order = c.order_at(f);
            let members: Vec<Spectrogram> = (1..=order)
                .map(|i| scalogram(&seg, &cfg(vec![f], 16), &[i as f64 * 3.0], sr).unwrap())
                .collect();
            for t in 0..sl.values.ncols() {
                let lo = members.iter().map(|m| m.values[[0, t]]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|m| m.values[[0, t]]).fold(0.0f64, f64::max);
                let v = sl.values[[fi, t]];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "f={f} t={t}");
            }
        }
    }

    #[test]
    fn adaptive_order_schedule() {
        let c = SuperletConfig {
            freqs_hz: vec![2.0, 101.0, 200.0],
            base_cycles: 3.0,
            order_min: 1,
            order_max: 7,
            time_decimation: 1,
        };
        assert_eq!(c.order_at(2.0), 1);
        assert_eq!(c.order_at(200.0), 7);
        assert_eq!(c.order_at(101.0), 4);
    }

    #[test]
    fn superlet_tone_argmax_matches_scalogram() {
        let sr = 1024.0;
        let freqs: Vec<f64> = (1..=10).map(|i| i as f64 * 10.0).collect();
        let mut c = cfg(freqs, 16);
        c.order_max = 3;
        let seg: Vec<f64> = (0..4096)
            .map(|n| (2.0 * std::f64::consts::PI * 40.0 * n as f64 / sr).sin())
            .collect();
        let sl = superlet_transform(&seg, &c, sr).unwrap();
        let sc = scalogram(&seg, &c, &vec![3.0; 10], sr).unwrap();
        let t = sl.values.ncols() / 2;
        let am = |s: &Spectrogram| {
            let col = s.values.column(t);
            (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap()
        };
        assert_eq!(am(&sl), am(&sc));
        assert_eq!(sl.freqs_hz[am(&sl)], 40.0);
    }

    #[test]
    fn batch_dims_and_independence() {
        use crate::signal_io::{AlignedPair, TranscriptSentence};
        use ndarray::Array2;
        let seg_len = 512;
        let make_pair = |fill: &dyn Fn(usize, usize) -> f32| AlignedPair {
            sentence: TranscriptSentence {
                index: 0,
                text: "x".into(),
                onset_s: 0.0,
                offset_s: 1.0,
            },
            segment: Array2::from_shape_fn((3, seg_len), |(e, t)| fill(e, t)),
            valid_len: seg_len,
            pad_applied: false,
        };
        let tone = |_: usize, t: usize| ((0.3 * t as f64).sin()) as f32;
        let p1 = make_pair(&tone);
        let p2 = make_pair(&|e, t| if e == 1 { 0.0 } else { tone(e, t) });
        let c = cfg(vec![20.0, 50.0], 4);
        let b = batch_transform(&[p1, p2], &c, 1024.0).unwrap();
        assert_eq!(b.values.dim(), (2, 3, 1, 2, 128));
        // identical segments -> identical slices
        let s00 = b.values.slice(ndarray::s![0, 0, 0, .., ..]).to_owned();
        let s02 = b.values.slice(ndarray::s![0, 2, 0, .., ..]).to_owned();
        assert_eq!(s00, s02);
        // zero electrode -> zero slice, others unaffected
        assert!(b.values.slice(ndarray::s![1, 1, 0, .., ..]).iter().all(|&v| v == 0.0));
        let s10 = b.values.slice(ndarray::s![1, 0, 0, .., ..]).to_owned();
        assert_eq!(s00, s10);
    }

    #[test]
    fn decimated_column_count() {
        let c = cfg(vec![10.0], 4);
        let seg = vec![0.0; crate::signal_io::TARGET_LEN];
        let s = scalogram(&seg, &c, &[3.0], 2048.0).unwrap();
        assert_eq!(s.values.ncols(), 2050);
    }

    #[test]
    fn batch_file_round_trip() {
        use tempfile::TempDir;
        let dir = TempDir::new().unwrap();
        let values = Array5::from_shape_fn((2, 2, 1, 3, 5), |(a, b, _, d, e)| {
            (a * 100 + b * 50 + d * 7 + e) as f64 * 0.25
        });
        let batch = SpectroBatch {
            values,
            freqs_hz: vec![2.0, 4.0, 8.0],
            hop: 4,
            config_digest: "abc123".into(),
        };
        let path = dir.path().join("b.ssen");
        write_batch(&path, &batch, 2048.0).unwrap();
        let back = read_batch(&path).unwrap();
        assert_eq!(back.values, batch.values);
        assert_eq!(back.freqs_hz, batch.freqs_hz);
        assert_eq!(back.hop, 4);
        assert_eq!(back.config_digest, "abc123");
    }
}
