//! `ssense` command-line interface.
//!
//! Exit codes: 0 success, 1 validation error (bad inputs or config),
//! 2 runtime error (I/O or numerical failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssense::config::PipelineConfig;
use ssense::error::{Error, Result};
use ssense::eval::{parse_report, random_baseline, render_aggregate, render_report, TestKind};
use ssense::pipeline;
use ssense::synth::{generate, SynthSpec};

#[derive(Parser)]
#[command(name = "ssense", version, about = "Sentence retrieval from neural signals")]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override paths.workdir from the config.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Override paths.embeddings: precomputed sentence embeddings file.
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,

    /// Override paths.embed_endpoint: remote embedding service URL.
    #[arg(long, global = true, conflicts_with = "embeddings", env = "SSENSE_EMBED_ENDPOINT")]
    embed_endpoint: Option<String>,

    /// Validate the config and print resolved settings without running.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align sentences to signal windows and write spectrogram shards.
    Preprocess,
    /// Train one encoder and evaluate it on the held-out test split.
    Train {
        /// Split/shuffle/init seed (default: train.seed from the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full multi-seed protocol and aggregate the reports.
    Protocol {
        /// Comma-separated seeds (default: 0..=9).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Row label for the aggregate table.
        #[arg(long, default_value = "SSENSE")]
        label: String,
    },
    /// Evaluate a saved checkpoint on its seed's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed the checkpoint was trained under.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the analytic random-retrieval baseline for n candidates.
    Baseline {
        n: usize,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        ks: Vec<usize>,
    },
    /// t-tests over report files: vs the random baseline, or paired
    /// against a second report set.
    Stats {
        /// Report files (group A).
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Report files for a paired comparison (group B).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        against: Option<Vec<PathBuf>>,
    },
    /// Generate a synthetic dataset plus a ready-to-run config.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 8)]
        per_cluster: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Aggregate report files into a mean ± SD table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "SSENSE")]
        label: String,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    // flags win over the config file
    if let Some(wd) = &cli.workdir {
        cfg.paths.workdir = wd.clone();
    }
    if let Some(e) = &cli.embeddings {
        cfg.paths.embeddings = Some(e.clone());
        cfg.paths.embed_endpoint = None;
    }
    if let Some(url) = &cli.embed_endpoint {
        cfg.paths.embed_endpoint = Some(url.clone());
        cfg.paths.embeddings = None;
    }
    Ok(cfg)
}

fn print_resolved(cfg: &PipelineConfig) {
    println!("config ok (digest {})", cfg.digest());
    print!("{}", cfg.to_toml());
}

fn load_reports(paths: &[PathBuf]) -> Result<Vec<ssense::eval::RetrievalReport>> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_report(&text, &p.display().to_string())
        })
        .collect()
}

fn print_stats(results: &[(String, ssense::eval::StatResult)]) {
    for (name, r) in results {
        let kind = match r.kind {
            TestKind::OneSample => "one-sample",
            TestKind::Paired => "paired",
        };
        println!(
            "{name}: t={:.4} df={} p={:.4} ({kind}, two-sided)",
            r.t, r.df, r.p_two_sided
        );
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess => {
            let cfg = load_config(cli)?;
            if cli.dry_run {
                print_resolved(&cfg);
                return Ok(());
            }
            let summary = pipeline::preprocess(&cfg)?;
            println!("{summary}");
        }
        Command::Train { seed } => {
            let cfg = load_config(cli)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            if cli.dry_run {
                print_resolved(&cfg);
                println!("seed: {seed}");
                return Ok(());
            }
            let art = pipeline::train_once(&cfg, seed)?;
            println!("checkpoint: {}", art.checkpoint_path.display());
            println!("metric log: {}", art.log_path.display());
            println!("report: {}", art.report_path.display());
            print!("{}", render_report(&art.report));
        }
        Command::Protocol { seeds, label } => {
            let cfg = load_config(cli)?;
            let seeds = seeds.clone().unwrap_or_else(|| (0..10).collect());
            if cli.dry_run {
                print_resolved(&cfg);
                println!("seeds: {seeds:?}");
                return Ok(());
            }
            let art = pipeline::protocol(&cfg, &seeds, label)?;
            for p in &art.report_paths {
                println!("report: {}", p.display());
            }
            println!("aggregate: {}", art.aggregate_path.display());
            print!("{}", art.aggregate_text);
        }
        Command::Eval { checkpoint, seed } => {
            let cfg = load_config(cli)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            if cli.dry_run {
                print_resolved(&cfg);
                return Ok(());
            }
            let report = pipeline::eval_checkpoint(&cfg, checkpoint, seed)?;
            print!("{}", render_report(&report));
        }
        Command::Baseline { n, ks } => {
            if *n == 0 {
                return Err(Error::Config("candidate count must be >= 1".into()));
            }
            print!("{}", render_report(&random_baseline(*n, ks)));
        }
        Command::Stats { reports, against } => {
            let a = load_reports(reports)?;
            let results = match against {
                Some(b_paths) => pipeline::stats_paired(&a, &load_reports(b_paths)?)?,
                None => pipeline::stats_vs_baseline(&a)?,
            };
            print_stats(&results);
        }
        Command::Synth {
            out,
            clusters,
            per_cluster,
            seed,
        } => {
            let spec = SynthSpec {
                n_clusters: *clusters,
                per_cluster: *per_cluster,
                seed: *seed,
                ..Default::default()
            };
            let config_path = generate(out, &spec)?;
            println!("config: {}", config_path.display());
        }
        Command::Report { reports, label } => {
            let parsed = load_reports(reports)?;
            print!("{}", render_aggregate(&parsed, label));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
