//! Differentiable per-electrode spectrogram encoder.
//!
//! Per electrode: a stack of valid-mode strided convolutions with rectifier
//! nonlinearity and optional average pooling, a global average pool over the
//! remaining F x T plane, a hidden linear layer, and a linear projection to
//! 512 dimensions. Per sample: mean pooling across electrodes followed by L2
//! normalization.
//!
//! Forward and reverse passes are written out by hand in f64; gradients are
//! exact up to floating-point rounding and are verified against central
//! finite differences in the tests.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ArrayView2, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 512;

/// One convolution stage: valid convolution with stride, rectifier, then
/// non-overlapping average pooling (`pool = (1, 1)` disables pooling).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pool: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub stages: Vec<ConvStage>,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub init_seed: u64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::EncoderSpec(m));
        if self.output_dim != EMBED_DIM {
            return fail(format!("output_dim must be {EMBED_DIM}, got {}", self.output_dim));
        }
        if self.stages.is_empty() {
            return fail("at least one conv stage required".into());
        }
        if self.hidden_width == 0 {
            return fail("hidden_width must be >= 1".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0
                || s.kernel.0 == 0
                || s.kernel.1 == 0
                || s.stride.0 == 0
                || s.stride.1 == 0
                || s.pool.0 == 0
                || s.pool.1 == 0
            {
                return fail(format!("stage {i}: all extents must be >= 1"));
            }
        }
        Ok(())
    }

    /// Canonical string hashed into checkpoint files.
    pub fn digest_string(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                format!(
                    "c{}k{}x{}s{}x{}p{}x{}",
                    s.out_channels, s.kernel.0, s.kernel.1, s.stride.0, s.stride.1, s.pool.0,
                    s.pool.1
                )
            })
            .collect();
        format!(
            "stages=[{}];hidden={};out={};init={}",
            stages.join(","),
            self.hidden_width,
            self.output_dim,
            self.init_seed
        )
    }
}

/// Flat parameter vector; views per layer are derived from the spec.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub values: Vec<f64>,
}

struct StageOffsets {
    w: usize,
    b: usize,
    in_channels: usize,
}

struct Offsets {
    stages: Vec<StageOffsets>,
    hidden_w: usize,
    hidden_b: usize,
    out_w: usize,
    out_b: usize,
    last_channels: usize,
    total: usize,
}

fn offsets(spec: &EncoderSpec) -> Offsets {
    let mut cursor = 0usize;
    let mut in_c = 1usize;
    let mut stages = Vec::with_capacity(spec.stages.len());
    for s in &spec.stages {
        let w = cursor;
        cursor += s.out_channels * in_c * s.kernel.0 * s.kernel.1;
        let b = cursor;
        cursor += s.out_channels;
        stages.push(StageOffsets {
            w,
            b,
            in_channels: in_c,
        });
        in_c = s.out_channels;
    }
    let hidden_w = cursor;
    cursor += spec.hidden_width * in_c;
    let hidden_b = cursor;
    cursor += spec.hidden_width;
    let out_w = cursor;
    cursor += spec.output_dim * spec.hidden_width;
    let out_b = cursor;
    cursor += spec.output_dim;
    Offsets {
        stages,
        hidden_w,
        hidden_b,
        out_w,
        out_b,
        last_channels: in_c,
        total: cursor,
    }
}

/// Total parameter count; a pure function of the spec.
pub fn param_count(spec: &EncoderSpec) -> usize {
    offsets(spec).total
}

/// Fan-in scaled uniform init, reproducible from `spec.init_seed`.
pub fn init_params(spec: &EncoderSpec) -> Result<Parameters> {
    spec.validate()?;
    let off = offsets(spec);
    let mut values = vec![0.0f64; off.total];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, values: &mut Vec<f64>| {
        let bound = (1.0 / fan_in as f64).sqrt();
        for v in &mut values[range] {
            *v = rng.random_range(-bound..bound);
        }
    };
    for (s, so) in spec.stages.iter().zip(&off.stages) {
        let fan_in = so.in_channels * s.kernel.0 * s.kernel.1;
        let w_len = s.out_channels * fan_in;
        fill(so.w..so.w + w_len, fan_in, &mut values);
        fill(so.b..so.b + s.out_channels, fan_in, &mut values);
    }
    fill(
        off.hidden_w..off.hidden_w + spec.hidden_width * off.last_channels,
        off.last_channels,
        &mut values,
    );
    fill(
        off.hidden_b..off.hidden_b + spec.hidden_width,
        off.last_channels,
        &mut values,
    );
    fill(
        off.out_w..off.out_w + spec.output_dim * spec.hidden_width,
        spec.hidden_width,
        &mut values,
    );
    fill(
        off.out_b..off.out_b + spec.output_dim,
        spec.hidden_width,
        &mut values,
    );
    Ok(Parameters { values })
}

/// 512-d unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct StageCache {
    /// Input feature map to the stage.
    input: Array3<f64>,
    /// Pre-activation (conv output before the rectifier).
    pre: Array3<f64>,
    /// Rectified map (pooling input).
    act: Array3<f64>,
}

pub struct ElectrodeCache {
    stages: Vec<StageCache>,
    /// Pooled output of the final stage (GAP input).
    gap_input: Array3<f64>,
    gap: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    output: Vec<f64>,
}

pub struct SampleCache {
    electrodes: Vec<ElectrodeCache>,
    /// Electrode-mean output vector, before normalization.
    pub pooled: Vec<f64>,
    pub pooled_norm: f64,
    embedding: Vec<f64>,
}

fn conv_forward(
    input: &Array3<f64>,
    w: &[f64],
    b: &[f64],
    stage: &ConvStage,
    in_c: usize,
    stage_idx: usize,
) -> Result<Array3<f64>> {
    let (_, in_f, in_t) = input.dim();
    let (kf, kt) = stage.kernel;
    let (sf, st) = stage.stride;
    if kf > in_f || kt > in_t {
        return Err(Error::EncoderSpec(format!(
            "stage {stage_idx}: kernel {kf}x{kt} exceeds input extents {in_f}x{in_t}"
        )));
    }
    let out_f = (in_f - kf) / sf + 1;
    let out_t = (in_t - kt) / st + 1;
    let mut out = Array3::<f64>::zeros((stage.out_channels, out_f, out_t));
    for o in 0..stage.out_channels {
        let bias = b[o];
        for i in 0..out_f {
            for j in 0..out_t {
                let mut acc = bias;
                for c in 0..in_c {
                    let w_base = ((o * in_c + c) * kf) * kt;
                    for u in 0..kf {
                        let row = i * sf + u;
                        for v in 0..kt {
                            acc += w[w_base + u * kt + v] * input[[c, row, j * st + v]];
                        }
                    }
                }
                out[[o, i, j]] = acc;
            }
        }
    }
    Ok(out)
}

fn avg_pool(input: &Array3<f64>, pool: (usize, usize)) -> Array3<f64> {
    if pool == (1, 1) {
        return input.clone();
    }
    let (c, f, t) = input.dim();
    let (pf, pt) = pool;
    let out_f = f / pf;
    let out_t = t / pt;
    let inv = 1.0 / (pf * pt) as f64;
    let mut out = Array3::<f64>::zeros((c, out_f, out_t));
    for ci in 0..c {
        for i in 0..out_f {
            for j in 0..out_t {
                let mut acc = 0.0;
                for u in 0..pf {
                    for v in 0..pt {
                        acc += input[[ci, i * pf + u, j * pt + v]];
                    }
                }
                out[[ci, i, j]] = acc * inv;
            }
        }
    }
    out
}

fn check_finite(map: &Array3<f64>, layer: &str) -> Result<()> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: layer.to_string(),
        });
    }
    Ok(())
}

fn encode_electrode_cached(
    spec: &EncoderSpec,
    params: &Parameters,
    x: ArrayView2<f64>,
) -> Result<ElectrodeCache> {
    let off = offsets(spec);
    let (f, t) = x.dim();
    let mut current = Array3::<f64>::zeros((1, f, t));
    current.slice_mut(ndarray::s![0, .., ..]).assign(&x);
    let mut stages = Vec::with_capacity(spec.stages.len());
    for (idx, (stage, so)) in spec.stages.iter().zip(&off.stages).enumerate() {
        let w_len = stage.out_channels * so.in_channels * stage.kernel.0 * stage.kernel.1;
        let w = &params.values[so.w..so.w + w_len];
        let b = &params.values[so.b..so.b + stage.out_channels];
        let pre = conv_forward(&current, w, b, stage, so.in_channels, idx)?;
        check_finite(&pre, &format!("stage{idx}_conv"))?;
        let act = pre.mapv(|v| v.max(0.0));
        let pooled = avg_pool(&act, stage.pool);
        if pooled.dim().1 == 0 || pooled.dim().2 == 0 {
            return Err(Error::EncoderSpec(format!(
                "stage {idx}: pooling collapses the feature map to zero extent"
            )));
        }
        stages.push(StageCache {
            input: std::mem::replace(&mut current, pooled),
            pre,
            act,
        });
    }
    let gap_input = current;
    let (c, gf, gt) = gap_input.dim();
    let inv = 1.0 / (gf * gt) as f64;
    let gap: Vec<f64> = (0..c)
        .map(|ci| gap_input.slice(ndarray::s![ci, .., ..]).sum() * inv)
        .collect();

    let hw = &params.values[off.hidden_w..off.hidden_w + spec.hidden_width * off.last_channels];
    let hb = &params.values[off.hidden_b..off.hidden_b + spec.hidden_width];
    let hidden_pre: Vec<f64> = (0..spec.hidden_width)
        .map(|h| {
            hb[h]
                + gap
                    .iter()
                    .enumerate()
                    .map(|(ci, g)| hw[h * off.last_channels + ci] * g)
                    .sum::<f64>()
        })
        .collect();
    if hidden_pre.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: "hidden_linear".into(),
        });
    }
    let hidden_act: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();

    let ow = &params.values[off.out_w..off.out_w + spec.output_dim * spec.hidden_width];
    let ob = &params.values[off.out_b..off.out_b + spec.output_dim];
    let output: Vec<f64> = (0..spec.output_dim)
        .map(|k| {
            ob[k]
                + hidden_act
                    .iter()
                    .enumerate()
                    .map(|(h, a)| ow[k * spec.hidden_width + h] * a)
                    .sum::<f64>()
        })
        .collect();
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: "output_linear".into(),
        });
    }
    Ok(ElectrodeCache {
        stages,
        gap_input,
        gap,
        hidden_pre,
        hidden_act,
        output,
    })
}

/// Forward pass for one electrode's F x T spectrogram.
pub fn encode_electrode(
    spec: &EncoderSpec,
    params: &Parameters,
    x: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    Ok(encode_electrode_cached(spec, params, x)?.output)
}

/// Forward pass for one sample (E x F x T): per-electrode encoding, mean
/// pooling across electrodes, L2 normalization. Returns the activation cache
/// needed for the reverse pass.
pub fn encode_sample_cached(
    spec: &EncoderSpec,
    params: &Parameters,
    x: ArrayView3<f64>,
) -> Result<(Embedding, SampleCache)> {
    let e = x.dim().0;
    let mut electrodes = Vec::with_capacity(e);
    for ei in 0..e {
        electrodes.push(encode_electrode_cached(
            spec,
            params,
            x.slice(ndarray::s![ei, .., ..]),
        )?);
    }
    let mut pooled = vec![0.0f64; spec.output_dim];
    for cache in &electrodes {
        for (p, o) in pooled.iter_mut().zip(&cache.output) {
            *p += o;
        }
    }
    let inv_e = 1.0 / e as f64;
    for p in &mut pooled {
        *p *= inv_e;
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateEmbedding { norm });
    }
    let embedding: Vec<f64> = pooled.iter().map(|v| v / norm).collect();
    Ok((
        Embedding(embedding.clone()),
        SampleCache {
            electrodes,
            pooled,
            pooled_norm: norm,
            embedding,
        },
    ))
}

pub fn encode_sample(
    spec: &EncoderSpec,
    params: &Parameters,
    x: ArrayView3<f64>,
) -> Result<Embedding> {
    Ok(encode_sample_cached(spec, params, x)?.0)
}

fn backward_electrode(
    spec: &EncoderSpec,
    params: &Parameters,
    cache: &ElectrodeCache,
    upstream: &[f64],
    grad: &mut [f64],
) {
    let off = offsets(spec);

    // output linear
    let ow = &params.values[off.out_w..off.out_w + spec.output_dim * spec.hidden_width];
    let mut g_hidden_act = vec![0.0f64; spec.hidden_width];
    for k in 0..spec.output_dim {
        let g = upstream[k];
        grad[off.out_b + k] += g;
        for h in 0..spec.hidden_width {
            grad[off.out_w + k * spec.hidden_width + h] += g * cache.hidden_act[h];
            g_hidden_act[h] += g * ow[k * spec.hidden_width + h];
        }
    }

    // hidden linear + rectifier
    let hw = &params.values[off.hidden_w..off.hidden_w + spec.hidden_width * off.last_channels];
    let mut g_gap = vec![0.0f64; off.last_channels];
    for h in 0..spec.hidden_width {
        let g = if cache.hidden_pre[h] > 0.0 {
            g_hidden_act[h]
        } else {
            0.0
        };
        grad[off.hidden_b + h] += g;
        for ci in 0..off.last_channels {
            grad[off.hidden_w + h * off.last_channels + ci] += g * cache.gap[ci];
            g_gap[ci] += g * hw[h * off.last_channels + ci];
        }
    }

    // global average pool
    let (c, gf, gt) = cache.gap_input.dim();
    let inv_gap = 1.0 / (gf * gt) as f64;
    let mut g_map = Array3::<f64>::zeros((c, gf, gt));
    for ci in 0..c {
        let g = g_gap[ci] * inv_gap;
        g_map.slice_mut(ndarray::s![ci, .., ..]).fill(g);
    }

    // conv stages, reversed
    for (idx, (stage, so)) in spec.stages.iter().zip(&off.stages).enumerate().rev() {
        let sc = &cache.stages[idx];

        // average pool backward
        let g_act = if stage.pool == (1, 1) {
            g_map
        } else {
            let (ac, af, at) = sc.act.dim();
            let (pf, pt) = stage.pool;
            let inv = 1.0 / (pf * pt) as f64;
            let mut g = Array3::<f64>::zeros((ac, af, at));
            let (_, of, ot) = g_map.dim();
            for ci in 0..ac {
                for i in 0..of {
                    for j in 0..ot {
                        let gv = g_map[[ci, i, j]] * inv;
                        for u in 0..pf {
                            for v in 0..pt {
                                g[[ci, i * pf + u, j * pt + v]] = gv;
                            }
                        }
                    }
                }
            }
            g
        };

        // rectifier backward into conv output gradient
        let mut g_pre = g_act;
        ndarray::Zip::from(&mut g_pre)
            .and(&sc.pre)
            .for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });

        // conv backward
        let (kf, kt) = stage.kernel;
        let (sf, st) = stage.stride;
        let in_c = so.in_channels;
        let (_, of, ot) = g_pre.dim();
        let (_, in_f, in_t) = sc.input.dim();
        let mut g_input = Array3::<f64>::zeros((in_c, in_f, in_t));
        let w = &params.values[so.w..so.w + stage.out_channels * in_c * kf * kt];
        for o in 0..stage.out_channels {
            for i in 0..of {
                for j in 0..ot {
                    let g = g_pre[[o, i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    grad[so.b + o] += g;
                    for ci in 0..in_c {
                        let w_base = ((o * in_c + ci) * kf) * kt;
                        for u in 0..kf {
                            let row = i * sf + u;
                            for v in 0..kt {
                                let col = j * st + v;
                                grad[so.w + w_base + u * kt + v] += g * sc.input[[ci, row, col]];
                                g_input[[ci, row, col]] += g * w[w_base + u * kt + v];
                            }
                        }
                    }
                }
            }
        }
        g_map = g_input;
    }
}

/// Reverse pass from a gradient on the mean-pooled, pre-normalization vector.
pub fn backward_sample_prenorm(
    spec: &EncoderSpec,
    params: &Parameters,
    cache: &SampleCache,
    upstream_on_pooled: &[f64],
    grad: &mut [f64],
) {
    let inv_e = 1.0 / cache.electrodes.len() as f64;
    let per_electrode: Vec<f64> = upstream_on_pooled.iter().map(|g| g * inv_e).collect();
    for ec in &cache.electrodes {
        backward_electrode(spec, params, ec, &per_electrode, grad);
    }
}

/// Reverse pass from a gradient on the normalized embedding, through the
/// normalization Jacobian, electrode mean pooling, and the conv stack.
/// Gradients accumulate into `grad` (same length as the parameter vector).
pub fn backward_sample(
    spec: &EncoderSpec,
    params: &Parameters,
    cache: &SampleCache,
    upstream: &[f64],
    grad: &mut [f64],
) {
    // d/dv of v/||v||: (g - e (e . g)) / ||v||
    let dot: f64 = cache
        .embedding
        .iter()
        .zip(upstream)
        .map(|(e, g)| e * g)
        .sum();
    let g_pooled: Vec<f64> = cache
        .embedding
        .iter()
        .zip(upstream)
        .map(|(e, g)| (g - e * dot) / cache.pooled_norm)
        .collect();
    backward_sample_prenorm(spec, params, cache, &g_pooled, grad);
}

const CKPT_MAGIC: &[u8; 4] = b"SSWT";
const CKPT_VERSION: u32 = 1;

/// Write a parameter checkpoint: magic "SSWT", version, spec digest, f32le
/// flat parameter vector.
pub fn write_checkpoint(path: &Path, spec: &EncoderSpec, params: &Parameters) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|er| Error::io(path, er))?,
    );
    let io = |er: std::io::Error| Error::io(path, er);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION).map_err(io)?;
    let digest = crate::config::digest_hex(&spec.digest_string());
    w.write_u32::<LittleEndian>(digest.len() as u32).map_err(io)?;
    w.write_all(digest.as_bytes()).map_err(io)?;
    w.write_u32::<LittleEndian>(params.values.len() as u32)
        .map_err(io)?;
    for &v in &params.values {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    Ok(())
}

/// Load a checkpoint, refusing on digest mismatch with the given spec.
pub fn read_checkpoint(path: &Path, spec: &EncoderSpec) -> Result<Parameters> {
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
    if &magic != CKPT_MAGIC {
        return Err(bad("bad magic, expected SSWT"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut dbuf = vec![0u8; dlen];
    r.read_exact(&mut dbuf).map_err(io)?;
    let file_digest = String::from_utf8(dbuf).map_err(|_| bad("invalid digest"))?;
    let spec_digest = crate::config::digest_hex(&spec.digest_string());
    if file_digest != spec_digest {
        return Err(Error::DigestMismatch {
            file_digest,
            spec_digest,
        });
    }
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if n != param_count(spec) {
        return Err(bad(&format!(
            "parameter count {n} does not match spec ({})",
            param_count(spec)
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.read_f32::<LittleEndian>().map_err(io)? as f64);
    }
    Ok(Parameters { values })
}
