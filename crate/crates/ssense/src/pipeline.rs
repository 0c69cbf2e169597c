//! Subcommand-level orchestration: composes the ingestion, transform,
//! training, and evaluation modules over one config and a workdir.

use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::Array5;

use crate::config::{PipelineConfig, Workdir};
use crate::embed::{load_embeddings, RemoteProvider, SentenceEmbeddingSet};
use crate::encoder::{read_checkpoint, write_checkpoint, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{render_aggregate, render_report, RetrievalReport, StatResult};
use crate::signal_io::{
    extract_window, filter_sentences, load_recording, load_transcript, make_split, read_pair_archive,
    write_pair_archive, TARGET_LEN,
};
use crate::superlet::{batch_transform, read_batch, standardize_batch, write_batch, SpectroBatch};
use crate::trainer::{evaluate, run_protocol, splitmix64, train, TrainData, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub kept: usize,
    pub dropped_duration: usize,
    pub dropped_bounds: usize,
}

impl std::fmt::Display for PreprocessSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "kept={} dropped_duration={} dropped_bounds={}",
            self.kept, self.dropped_duration, self.dropped_bounds
        )
    }
}

fn required<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("paths.{what} is required for this command")))
}

fn shard_path(wd: &Workdir, i: usize) -> PathBuf {
    wd.spectra_dir().join(format!("pair_{i:05}.ssen"))
}

/// Ingest recording + transcript, align windows, superlet-transform, and
/// write the pair archive plus one standardized spectrogram shard per pair.
pub fn preprocess(cfg: &PipelineConfig) -> Result<PreprocessSummary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    wd.ensure_layout()?;
    let _lock = wd.acquire_lock()?;

    let rec = load_recording(required(&cfg.paths.manifest, "manifest")?)?;
    let transcript = load_transcript(required(&cfg.paths.transcript, "transcript")?)?;
    let kept_sentences = filter_sentences(&transcript, cfg.signal.max_sentence_dur_s);
    let dropped_duration = transcript.len() - kept_sentences.len();

    let mut pairs = Vec::new();
    let mut dropped_bounds = 0usize;
    for s in &kept_sentences {
        match extract_window(
            &rec,
            s,
            cfg.signal.pre_context_s,
            cfg.signal.post_context_s,
            TARGET_LEN,
        ) {
            Ok(p) => pairs.push(p),
            Err(Error::WindowOutOfBounds { .. }) | Err(Error::WindowTooLong { .. }) => {
                dropped_bounds += 1;
            }
            Err(e) => return Err(e),
        }
    }
    write_pair_archive(&wd.pair_archive(), &pairs)?;

    let slcfg = cfg.superlet.to_config()?;
    let mut batch = batch_transform(&pairs, &slcfg, cfg.signal.sample_rate_hz)?;
    standardize_batch(&mut batch);
    let (b, e, c, f, t) = batch.values.dim();
    for i in 0..b {
        let mut values = Array5::<f64>::zeros((1, e, c, f, t));
        values
            .slice_mut(ndarray::s![0, .., .., .., ..])
            .assign(&batch.values.slice(ndarray::s![i, .., .., .., ..]));
        let shard = SpectroBatch {
            values,
            freqs_hz: batch.freqs_hz.clone(),
            hop: batch.hop,
            config_digest: batch.config_digest.clone(),
        };
        write_batch(&shard_path(&wd, i), &shard, cfg.signal.sample_rate_hz)?;
    }

    Ok(PreprocessSummary {
        kept: pairs.len(),
        dropped_duration,
        dropped_bounds,
    })
}

/// Resolve the frozen sentence embeddings per config: a local file or the
/// remote service (exactly one must be configured).
pub fn resolve_embeddings(
    cfg: &PipelineConfig,
    sentences: &[String],
) -> Result<SentenceEmbeddingSet> {
    match (&cfg.paths.embeddings, &cfg.paths.embed_endpoint) {
        (Some(_), Some(_)) => Err(Error::Config(
            "paths.embeddings and paths.embed_endpoint are mutually exclusive".into(),
        )),
        (Some(path), None) => load_embeddings(path),
        (None, Some(endpoint)) => {
            let cache_dir = cfg
                .paths
                .cache_dir
                .clone()
                .unwrap_or_else(|| cfg.paths.workdir.join("cache"));
            let provider = RemoteProvider::new(endpoint, Duration::from_secs(30), &cache_dir);
            provider.fetch(sentences)
        }
        (None, None) => Err(Error::Config(
            "one of paths.embeddings or paths.embed_endpoint must be set".into(),
        )),
    }
}

/// Load preprocess outputs plus frozen embeddings into one training bundle.
pub fn load_train_data(cfg: &PipelineConfig) -> Result<TrainData> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let pairs = read_pair_archive(&wd.pair_archive())?;
    if pairs.is_empty() {
        return Err(Error::Config(
            "pair archive is empty; run preprocess first".into(),
        ))
        ;
    }
    let mut stacked: Option<SpectroBatch> = None;
    for i in 0..pairs.len() {
        let shard = read_batch(&shard_path(&wd, i))?;
        match &mut stacked {
            None => {
                let (_, e, c, f, t) = shard.values.dim();
                let mut values = Array5::<f64>::zeros((pairs.len(), e, c, f, t));
                values
                    .slice_mut(ndarray::s![0, .., .., .., ..])
                    .assign(&shard.values.slice(ndarray::s![0, .., .., .., ..]));
                stacked = Some(SpectroBatch {
                    values,
                    freqs_hz: shard.freqs_hz,
                    hop: shard.hop,
                    config_digest: shard.config_digest,
                });
            }
            Some(batch) => {
                if shard.config_digest != batch.config_digest {
                    return Err(Error::DigestMismatch {
                        file_digest: shard.config_digest,
                        spec_digest: batch.config_digest.clone(),
                    });
                }
                batch
                    .values
                    .slice_mut(ndarray::s![i, .., .., .., ..])
                    .assign(&shard.values.slice(ndarray::s![0, .., .., .., ..]));
            }
        }
    }
    let sentences: Vec<String> = pairs.iter().map(|p| p.sentence.text.clone()).collect();
    let mut unique: Vec<String> = Vec::new();
    for s in &sentences {
        if !unique.contains(s) {
            unique.push(s.clone());
        }
    }
    let set = resolve_embeddings(cfg, &unique)?;
    let text_embeddings = sentences
        .iter()
        .map(|s| set.vector_for(s).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainData {
        spectra: stacked.expect("non-empty pair set"),
        sentences,
        text_embeddings,
        source_tag: set.source_tag,
    })
}

/// The encoder spec a given protocol seed trains under (fresh init per seed).
pub fn spec_for_seed(cfg: &PipelineConfig, seed: u64) -> EncoderSpec {
    let mut spec = cfg.encoder.clone();
    spec.init_seed = cfg.encoder.init_seed ^ splitmix64(seed);
    spec
}

pub struct TrainArtifacts {
    pub report: RetrievalReport,
    pub report_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub outcome: TrainOutcome,
}

fn write_metric_log(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_recall@10,elapsed_s\n");
    for row in &outcome.log {
        text.push_str(&format!(
            "{},{},{},{:.3}\n",
            row.epoch, row.train_loss, row.val_recall10, row.elapsed_s
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report_file(path: &Path, report: &RetrievalReport) -> Result<()> {
    std::fs::write(path, render_report(report)).map_err(|e| Error::io(path, e))
}

/// One full training run for `seed`: train/val/test split, contrastive
/// training with early stopping, checkpoint + metric log + test report.
pub fn train_once(cfg: &PipelineConfig, seed: u64) -> Result<TrainArtifacts> {
    let wd = Workdir::new(&cfg.paths.workdir);
    wd.ensure_layout()?;
    let _lock = wd.acquire_lock()?;
    let data = load_train_data(cfg)?;
    let split = make_split(data.n_pairs(), seed)?;
    let spec = spec_for_seed(cfg, seed);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let outcome = train(&data, &split, &spec, &train_cfg, &cfg.augment, &cfg.eval)?;

    let checkpoint_path = wd.checkpoints_dir().join(format!("encoder_seed{seed}.sswt"));
    write_checkpoint(&checkpoint_path, &spec, &outcome.params)?;
    let log_path = wd.reports_dir().join(format!("train_seed{seed}.csv"));
    write_metric_log(&log_path, &outcome)?;

    let digest = cfg.digest();
    let report = evaluate(
        &data,
        &spec,
        &outcome.params,
        &split.test,
        &cfg.eval,
        seed,
        &digest,
    )?;
    let report_path = wd.reports_dir().join(format!("report_seed{seed}.txt"));
    write_report_file(&report_path, &report)?;
    Ok(TrainArtifacts {
        report,
        report_path,
        checkpoint_path,
        log_path,
        outcome,
    })
}

pub struct ProtocolArtifacts {
    pub reports: Vec<RetrievalReport>,
    pub report_paths: Vec<PathBuf>,
    pub aggregate_path: PathBuf,
    pub aggregate_text: String,
}

/// The multi-seed protocol: per-seed training + test reports, then one
/// aggregate table over all seeds.
pub fn protocol(cfg: &PipelineConfig, seeds: &[u64], label: &str) -> Result<ProtocolArtifacts> {
    if seeds.is_empty() {
        return Err(Error::Config("protocol needs at least one seed".into()));
    }
    let wd = Workdir::new(&cfg.paths.workdir);
    wd.ensure_layout()?;
    let _lock = wd.acquire_lock()?;
    let data = load_train_data(cfg)?;
    let digest = cfg.digest();
    let results = run_protocol(
        &data,
        &cfg.encoder,
        &cfg.train,
        &cfg.augment,
        &cfg.eval,
        seeds,
        &digest,
    )?;

    let mut reports = Vec::new();
    let mut report_paths = Vec::new();
    for (seed, (report, outcome)) in seeds.iter().zip(&results) {
        let spec = spec_for_seed(cfg, *seed);
        write_checkpoint(
            &wd.checkpoints_dir().join(format!("encoder_seed{seed}.sswt")),
            &spec,
            &outcome.params,
        )?;
        write_metric_log(
            &wd.reports_dir().join(format!("train_seed{seed}.csv")),
            outcome,
        )?;
        let path = wd.reports_dir().join(format!("report_seed{seed}.txt"));
        write_report_file(&path, report)?;
        reports.push(report.clone());
        report_paths.push(path);
    }
    let aggregate_text = render_aggregate(&reports, label);
    let aggregate_path = wd.reports_dir().join("aggregate.txt");
    std::fs::write(&aggregate_path, &aggregate_text)
        .map_err(|e| Error::io(&aggregate_path, e))?;
    Ok(ProtocolArtifacts {
        reports,
        report_paths,
        aggregate_path,
        aggregate_text,
    })
}

/// Score a saved checkpoint on the test split of `seed` (the seed used when
/// the checkpoint was trained, so the spec digest and split both match).
pub fn eval_checkpoint(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    seed: u64,
) -> Result<RetrievalReport> {
    let data = load_train_data(cfg)?;
    let spec = spec_for_seed(cfg, seed);
    let params = read_checkpoint(checkpoint, &spec)?;
    let split = make_split(data.n_pairs(), seed)?;
    evaluate(
        &data,
        &spec,
        &params,
        &split.test,
        &cfg.eval,
        seed,
        &cfg.digest(),
    )
}

/// Per-metric values (recall@k for each k, then MRR) of one report, with
/// metric labels taken from the first report's k list.
fn metric_values(reports: &[RetrievalReport]) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    if reports.is_empty() {
        return out;
    }
    for (ki, &(k, _)) in reports[0].recall_at.iter().enumerate() {
        let vals = reports.iter().map(|r| r.recall_at[ki].1).collect();
        out.push((format!("recall@{k}"), vals));
    }
    out.push(("mrr".into(), reports.iter().map(|r| r.mrr).collect()));
    out
}

/// One-sample t-tests of each metric against the analytic random baseline.
pub fn stats_vs_baseline(reports: &[RetrievalReport]) -> Result<Vec<(String, StatResult)>> {
    if reports.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let n = reports[0].n_candidates;
    let ks: Vec<usize> = reports[0].recall_at.iter().map(|&(k, _)| k).collect();
    let baseline = crate::eval::random_baseline(n, &ks);
    let mut mu0s: Vec<f64> = baseline.recall_at.iter().map(|&(_, v)| v).collect();
    mu0s.push(baseline.mrr);
    metric_values(reports)
        .into_iter()
        .zip(mu0s)
        .map(|((name, vals), mu0)| crate::eval::one_sample_t(&vals, mu0).map(|r| (name, r)))
        .collect()
}

/// Paired t-tests of each metric between two equally sized report sets.
pub fn stats_paired(
    a: &[RetrievalReport],
    b: &[RetrievalReport],
) -> Result<Vec<(String, StatResult)>> {
    if a.len() != b.len() {
        return Err(Error::UnequalLengths(a.len(), b.len()));
    }
    metric_values(a)
        .into_iter()
        .zip(metric_values(b))
        .map(|((name, va), (_, vb))| crate::eval::paired_t(&va, &vb).map(|r| (name, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::report_from_ranks;
    use crate::synth::{generate, SynthSpec};
    use tempfile::TempDir;

    fn tiny_config(dir: &Path) -> PipelineConfig {
        let spec = SynthSpec {
            n_clusters: 2,
            per_cluster: 3,
            ..Default::default()
        };
        let config_path = generate(dir, &spec).unwrap();
        PipelineConfig::load(&config_path).unwrap()
    }

    #[test]
    fn preprocess_writes_archive_and_shards() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        let summary = preprocess(&cfg).unwrap();
        assert_eq!(
            summary,
            PreprocessSummary {
                kept: 6,
                dropped_duration: 0,
                dropped_bounds: 0
            }
        );
        let wd = Workdir::new(&cfg.paths.workdir);
        assert!(wd.pair_archive().exists());
        for i in 0..6 {
            assert!(shard_path(&wd, i).exists());
        }
        assert!(!wd.root.join(".lock").exists(), "lock released after run");
    }

    #[test]
    fn preprocess_rerun_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        preprocess(&cfg).unwrap();
        let wd = Workdir::new(&cfg.paths.workdir);
        let first = std::fs::read(shard_path(&wd, 0)).unwrap();
        let first_archive = std::fs::read(wd.pair_archive()).unwrap();
        preprocess(&cfg).unwrap();
        assert_eq!(first, std::fs::read(shard_path(&wd, 0)).unwrap());
        assert_eq!(first_archive, std::fs::read(wd.pair_archive()).unwrap());
    }

    #[test]
    fn load_train_data_aligns_embeddings() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        preprocess(&cfg).unwrap();
        let data = load_train_data(&cfg).unwrap();
        assert_eq!(data.n_pairs(), 6);
        assert_eq!(data.spectra.values.dim().0, 6);
        // every embedding is unit-norm and matches its sentence's file entry
        let set =
            crate::embed::load_embeddings(cfg.paths.embeddings.as_ref().unwrap()).unwrap();
        for (s, v) in data.sentences.iter().zip(&data.text_embeddings) {
            assert_eq!(v.as_slice(), set.vector_for(s).unwrap());
        }
    }

    #[test]
    fn embeddings_config_is_exclusive() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.paths.embed_endpoint = Some("http://localhost:1/embed".into());
        assert!(matches!(
            resolve_embeddings(&cfg, &[]),
            Err(Error::Config(_))
        ));
        cfg.paths.embeddings = None;
        cfg.paths.embed_endpoint = None;
        assert!(matches!(
            resolve_embeddings(&cfg, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stats_helpers_cover_both_kinds() {
        let mk = |ranks: Vec<usize>| {
            report_from_ranks(ranks, 10, &[1, 5], 0, "d", "t").unwrap()
        };
        let a: Vec<_> = (0..5).map(|i| mk(vec![1 + i % 2, 2, 3 + i])).collect();
        let b: Vec<_> = (0..5).map(|i| mk(vec![5 + i % 3, 6, 7])).collect();
        let vs = stats_vs_baseline(&a).unwrap();
        assert_eq!(vs.len(), 3); // recall@1, recall@5, mrr
        assert!(vs.iter().all(|(_, r)| r.kind == crate::eval::TestKind::OneSample));
        let pr = stats_paired(&a, &b).unwrap();
        assert_eq!(pr.len(), 3);
        assert!(pr.iter().all(|(_, r)| r.kind == crate::eval::TestKind::Paired));
        // a dominates b everywhere, so the mrr difference is positive
        let (_, mrr_stat) = &pr[2];
        assert!(mrr_stat.t > 0.0);
        assert!(matches!(
            stats_paired(&a, &b[..3]),
            Err(Error::UnequalLengths(5, 3))
        ));
    }
}
