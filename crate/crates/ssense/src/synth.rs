//! Synthetic dataset generator for end-to-end pipeline checks.
//!
//! Emits a complete input triple (manifest + signal blob, transcript,
//! embeddings) plus a ready-to-run pipeline config. Sentence identity is
//! encoded as a pure-tone frequency: each of the 64 sentences gets its own
//! tone on a log grid, and sentences sharing an embedding cluster occupy one
//! contiguous frequency band, so a spectrogram encoder can recover both the
//! cluster and the exact sentence.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalSection, PipelineConfig, SuperletSection, TrainSection};
use crate::embed::{save_embeddings, SentenceEmbeddingSet};
use crate::encoder::{ConvStage, EncoderSpec, EMBED_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub n_electrodes: usize,
    pub sample_rate_hz: f64,
    /// Tone grid endpoints (log-spaced, one tone per sentence).
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub tone_amp: f64,
    pub noise_sd: f64,
    /// Within-cluster embedding jitter scale (per gaussian component).
    pub embed_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_clusters: 8,
            per_cluster: 8,
            n_electrodes: 2,
            sample_rate_hz: 2048.0,
            f_lo_hz: 10.0,
            f_hi_hz: 199.0,
            tone_amp: 1.0,
            noise_sd: 0.05,
            embed_jitter: 0.04,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn n_sentences(&self) -> usize {
        self.n_clusters * self.per_cluster
    }

    /// Tone frequency for sentence `i`: log-spaced over [f_lo, f_hi].
    pub fn tone_hz(&self, i: usize) -> f64 {
        let n = self.n_sentences();
        if n == 1 {
            return self.f_lo_hz;
        }
        let ratio = self.f_hi_hz / self.f_lo_hz;
        self.f_lo_hz * ratio.powf(i as f64 / (n - 1) as f64)
    }
}

const SENTENCE_GAP_S: f64 = 6.0;
const SENTENCE_DUR_S: f64 = 2.5;
const FIRST_ONSET_S: f64 = 1.0;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per draw keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| standard_normal(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Clustered sentence embeddings: unit gaussian centroid per cluster, each
/// member perturbed enough to stay separable within its cluster.
pub fn synth_embeddings(spec: &SynthSpec) -> SentenceEmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let centroids: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| normalized(gaussian_vec(&mut rng, EMBED_DIM)))
        .collect();
    let mut sentences = Vec::new();
    let mut vectors = Vec::new();
    for i in 0..spec.n_sentences() {
        let c = i / spec.per_cluster;
        let mut v = gaussian_vec(&mut rng, EMBED_DIM);
        for (x, &m) in v.iter_mut().zip(&centroids[c]) {
            *x = m + spec.embed_jitter * *x;
        }
        vectors.push(normalized(v));
        sentences.push(format!("cluster {c} item {} tone {i}", i % spec.per_cluster));
    }
    SentenceEmbeddingSet {
        sentences,
        vectors,
        source_tag: "synth".into(),
    }
}

/// Superlet grid matched to the synthetic tone grid.
fn synth_superlet(spec: &SynthSpec) -> SuperletSection {
    SuperletSection {
        f_min_hz: spec.f_lo_hz,
        f_max_hz: spec.f_hi_hz,
        n_freqs: spec.n_sentences(),
        spacing: "log".into(),
        base_cycles: 30.0,
        order_min: 1,
        order_max: 3,
        time_decimation: 128,
    }
}

/// Encoder whose first stage spans the full frequency axis, so tone position
/// on the grid survives the later global average pool.
fn synth_encoder(spec: &SynthSpec) -> EncoderSpec {
    EncoderSpec {
        stages: vec![
            ConvStage {
                out_channels: 32,
                kernel: (spec.n_sentences(), 9),
                stride: (1, 2),
                pool: (1, 2),
            },
            ConvStage {
                out_channels: 48,
                kernel: (1, 5),
                stride: (1, 2),
                pool: (1, 2),
            },
        ],
        hidden_width: 64,
        output_dim: EMBED_DIM,
        init_seed: 0,
    }
}

/// Generate the dataset into `out_dir`: manifest.toml + signal.f32,
/// transcript.csv, embeddings.sstx, and config.toml wired to them.
/// Returns the path of the written config.
pub fn generate(out_dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.n_sentences() < 3 {
        return Err(Error::Config(
            "synthetic dataset needs at least 3 sentences".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sr = spec.sample_rate_hz;
    let n = spec.n_sentences();
    let total_s = FIRST_ONSET_S + n as f64 * SENTENCE_GAP_S;
    let n_samples = (total_s * sr).ceil() as usize;

    // signal: background noise plus one tone burst per sentence
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut signal = vec![0.0f32; spec.n_electrodes * n_samples];
    for x in &mut signal {
        *x = (spec.noise_sd * standard_normal(&mut rng)) as f32;
    }
    for i in 0..n {
        let f = spec.tone_hz(i);
        let onset_s = FIRST_ONSET_S + i as f64 * SENTENCE_GAP_S;
        let start = (onset_s * sr).round() as usize;
        let len = (SENTENCE_DUR_S * sr).round() as usize;
        for e in 0..spec.n_electrodes {
            // a per-electrode phase offset keeps electrodes distinct
            let phase = e as f64 * 0.7;
            for t in 0..len {
                let x = spec.tone_amp
                    * (std::f64::consts::TAU * f * t as f64 / sr + phase).sin();
                signal[e * n_samples + start + t] += x as f32;
            }
        }
    }
    let blob: Vec<u8> = signal.iter().flat_map(|v| v.to_le_bytes()).collect();
    let signal_path = out_dir.join("signal.f32");
    std::fs::write(&signal_path, blob).map_err(|e| Error::io(&signal_path, e))?;

    let electrodes: Vec<String> = (0..spec.n_electrodes)
        .map(|e| format!("\"e{e:02}\""))
        .collect();
    let manifest = format!(
        "subject_id = \"synth01\"\nsample_rate_hz = {sr}\nelectrodes = [{}]\nsignal_file = \"signal.f32\"\ndtype = \"f32le\"\nlayout = \"electrode_major\"\n",
        electrodes.join(", ")
    );
    let manifest_path = out_dir.join("manifest.toml");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let embeds = synth_embeddings(spec);
    let mut transcript = String::from("index,text,onset_s,offset_s\n");
    for i in 0..n {
        let onset = FIRST_ONSET_S + i as f64 * SENTENCE_GAP_S;
        transcript.push_str(&format!(
            "{i},{},{onset},{}\n",
            embeds.sentences[i],
            onset + SENTENCE_DUR_S
        ));
    }
    let transcript_path = out_dir.join("transcript.csv");
    std::fs::write(&transcript_path, transcript)
        .map_err(|e| Error::io(&transcript_path, e))?;

    let embeds_path = out_dir.join("embeddings.sstx");
    save_embeddings(&embeds_path, &embeds)?;

    let config = PipelineConfig {
        paths: crate::config::PathsConfig {
            manifest: Some(manifest_path),
            transcript: Some(transcript_path),
            embeddings: Some(embeds_path),
            embed_endpoint: None,
            workdir: out_dir.join("work"),
            cache_dir: None,
        },
        signal: crate::config::SignalConfig {
            sample_rate_hz: sr,
            ..Default::default()
        },
        superlet: synth_superlet(spec),
        encoder: synth_encoder(spec),
        augment: Default::default(),
        train: TrainSection {
            learning_rate: 0.002,
            batch_size: 16,
            max_epochs: 200,
            patience: 30,
            ..Default::default()
        },
        eval: EvalSection {
            ks: vec![1, 8, 32],
            pool: "all".into(),
        },
    };
    config.validate()?;
    let config_path = out_dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml())
        .map_err(|e| Error::io(&config_path, e))?;
    Ok(config_path)
}
