//! Pipeline configuration: one TOML file with per-module sections, plus a
//! canonical digest embedded in every output artifact for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::MaskConfig;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::superlet::SuperletConfig;

pub fn digest_hex(s: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embed_endpoint: Option<String>,
    pub workdir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalConfig {
    pub sample_rate_hz: f64,
    pub pre_context_s: f64,
    pub post_context_s: f64,
    pub max_sentence_dur_s: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            sample_rate_hz: 2048.0,
            pre_context_s: 0.5,
            post_context_s: 1.0,
            max_sentence_dur_s: 4.0,
        }
    }
}

/// Frequency-grid spec; expanded into explicit frequencies at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperletSection {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub n_freqs: usize,
    pub spacing: String,
    pub base_cycles: f64,
    pub order_min: usize,
    pub order_max: usize,
    pub time_decimation: usize,
}

impl Default for SuperletSection {
    fn default() -> Self {
        SuperletSection {
            f_min_hz: 2.0,
            f_max_hz: 200.0,
            n_freqs: 40,
            spacing: "log".into(),
            base_cycles: 3.0,
            order_min: 1,
            order_max: 7,
            time_decimation: 32,
        }
    }
}

impl SuperletSection {
    pub fn to_config(&self) -> Result<SuperletConfig> {
        let freqs_hz = match self.spacing.as_str() {
            "log" => crate::superlet::log_spaced_freqs(self.f_min_hz, self.f_max_hz, self.n_freqs),
            "linear" => {
                let n = self.n_freqs;
                if n == 1 {
                    vec![self.f_min_hz]
                } else {
                    let step = (self.f_max_hz - self.f_min_hz) / (n - 1) as f64;
                    (0..n).map(|i| self.f_min_hz + i as f64 * step).collect()
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "superlet.spacing must be \"log\" or \"linear\", got {other:?}"
                )))
            }
        };
        Ok(SuperletConfig {
            freqs_hz,
            base_cycles: self.base_cycles,
            order_min: self.order_min,
            order_max: self.order_max,
            time_decimation: self.time_decimation,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub symmetric: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            temperature: 0.07,
            learning_rate: 0.0005,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            symmetric: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// "split": candidates are the evaluated split's sentences;
    /// "all": candidates are every sentence in the pair archive.
    pub pool: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 10, 50],
            pool: "split".into(),
        }
    }
}

fn default_encoder() -> EncoderSpec {
    EncoderSpec {
        stages: vec![
            crate::encoder::ConvStage {
                out_channels: 16,
                kernel: (5, 5),
                stride: (2, 2),
                pool: (2, 2),
            },
            crate::encoder::ConvStage {
                out_channels: 32,
                kernel: (3, 3),
                stride: (1, 1),
                pool: (2, 2),
            },
        ],
        hidden_width: 64,
        output_dim: crate::encoder::EMBED_DIM,
        init_seed: 0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub signal: SignalConfig,
    #[serde(default)]
    pub superlet: SuperletSection,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub augment: MaskConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.ks.is_empty() {
            return Err(Error::Config("eval.ks must be non-empty".into()));
        }
        for w in self.eval.ks.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("eval.ks must be sorted ascending".into()));
            }
        }
        if !matches!(self.eval.pool.as_str(), "split" | "all") {
            return Err(Error::Config(format!(
                "eval.pool must be \"split\" or \"all\", got {:?}",
                self.eval.pool
            )));
        }
        if !(self.train.temperature > 0.0) {
            return Err(Error::Config("train.temperature must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.train.patience < 1 {
            return Err(Error::Config("train.patience must be >= 1".into()));
        }
        if self.train.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        for r in [self.augment.r_f, self.augment.r_t, self.augment.r_e] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mask ratio {r} outside [0, 1]")));
            }
        }
        self.encoder.validate()?;
        self.superlet.to_config()?.validate(self.signal.sample_rate_hz)?;
        Ok(())
    }

    /// Digest of the fully resolved config; embedded in output artifacts.
    pub fn digest(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        digest_hex(&canonical)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Workdir layout: fixed subdirectories keyed off one root.
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: &Path) -> Self {
        Workdir {
            root: root.to_path_buf(),
        }
    }

    pub fn pairs_dir(&self) -> PathBuf {
        self.root.join("pairs")
    }

    pub fn spectra_dir(&self) -> PathBuf {
        self.root.join("spectra")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn pair_archive(&self) -> PathBuf {
        self.pairs_dir().join("pairs.sspr")
    }

    pub fn ensure_layout(&self) -> Result<()> {
        for d in [
            self.root.clone(),
            self.pairs_dir(),
            self.spectra_dir(),
            self.checkpoints_dir(),
            self.reports_dir(),
        ] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    fn lock_path(&self) -> PathBuf {
        self.root.join(".lock")
    }

    /// Refuse to start while another run holds the workdir.
    pub fn acquire_lock(&self) -> Result<WorkdirLock> {
        let p = self.lock_path();
        if p.exists() {
            return Err(Error::WorkdirLocked(self.root.clone()));
        }
        std::fs::write(&p, format!("pid={}\n", std::process::id()))
            .map_err(|e| Error::io(&p, e))?;
        Ok(WorkdirLock { path: p })
    }
}

pub struct WorkdirLock {
    path: PathBuf,
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
