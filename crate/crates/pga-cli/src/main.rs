//! `pga`: generates phantom datasets, trains per-patch age models, and
//! evaluates fusion ensembles, all under one output directory.
//!
//! Precedence: compiled-in defaults < `--config` TOML file < command-line
//! flags. A relative output directory resolves against `PGA_OUT_DIR` when
//! that variable is set, otherwise against the working directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pga_core::config::{FusionStrategy, PipelineConfig};
use pga_core::pipeline::{cmd_evaluate, cmd_gen_data, cmd_train, RunLog, RunPaths, TrainTarget};
use pga_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pga",
    version,
    about = "Patch-grid age regression on synthetic phantom volumes",
    propagate_version = true
)]
struct Cli {
    /// TOML config file; omitting it runs on the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory for all artifacts (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Master seed for data, splits, init, and shuffling (overrides the
    /// config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    GenData {
        /// Number of subjects to generate.
        #[arg(long)]
        n: Option<usize>,
        /// Regenerate even if a dataset is already present.
        #[arg(long)]
        force: bool,
    },
    /// Train patch models and/or the whole-volume baseline.
    Train {
        /// Train only the patch with this grid index.
        #[arg(long, conflicts_with_all = ["all_patches", "baseline"])]
        patch: Option<usize>,
        /// Train every patch on the grid (the default).
        #[arg(long, conflicts_with = "baseline")]
        all_patches: bool,
        /// Train the whole-volume baseline instead of patch models.
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Retrain even when a matching checkpoint exists; also replaces
        /// corrupt or stale checkpoints.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate trained models: prediction CSVs, fusion, report, plots.
    Evaluate {
        /// Fused predictor used for the scatter export.
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Validation-MAE cutoff for patch selection; "inf" keeps all
        /// patches.
        #[arg(long, value_parser = parse_threshold, value_name = "YEARS|inf")]
        threshold: Option<f64>,
        /// Fit a linear age-bias model on validation predictions and report
        /// corrected test metrics.
        #[arg(long, value_name = "BOOL")]
        bias_correct: Option<bool>,
        /// Ridge penalty for the linear fusion fit (plain least squares when
        /// unset).
        #[arg(long)]
        ridge: Option<f64>,
    },
}

/// Per-run training settings, each overriding the config file.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Worker threads for concurrent patch jobs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Mean,
    Linear,
}

fn parse_threshold(s: &str) -> std::result::Result<f64, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(f64::INFINITY);
    }
    s.parse::<f64>()
        .map_err(|_| format!("expected a number of years or \"inf\", got {s:?}"))
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenData { n, .. } => {
            if let Some(n) = n {
                cfg.n_subjects = *n;
            }
        }
        Command::Train { overrides, .. } => {
            if let Some(epochs) = overrides.epochs {
                cfg.train.epochs = epochs;
            }
            if let Some(batch) = overrides.batch_size {
                cfg.train.batch_size = batch;
            }
            if let Some(lr) = overrides.learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(jobs) = overrides.jobs {
                cfg.train.parallel_patch_jobs = jobs;
            }
        }
        Command::Evaluate {
            fusion,
            threshold,
            bias_correct,
            ridge,
        } => {
            if let Some(fusion) = fusion {
                cfg.fusion.strategy = match fusion {
                    FusionArg::Mean => FusionStrategy::Mean,
                    FusionArg::Linear => FusionStrategy::Linear,
                };
            }
            if let Some(t) = threshold {
                cfg.fusion.threshold_years = *t;
            }
            if let Some(b) = bias_correct {
                cfg.bias_correct = *b;
            }
            if ridge.is_some() {
                cfg.fusion.ridge = *ridge;
            }
        }
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let paths = RunPaths::new(cfg.resolved_out_dir());
    let mut log = RunLog::open(&paths.run_log())?;

    match &cli.command {
        Command::GenData { force, .. } => {
            let subjects = cmd_gen_data(&cfg, *force, &mut log)?;
            println!(
                "dataset ready: {} subjects under {}",
                subjects.len(),
                paths.data_dir().display()
            );
        }
        Command::Train {
            patch,
            baseline,
            force,
            ..
        } => {
            let target = match (patch, baseline) {
                (Some(i), _) => TrainTarget::Patch(*i),
                (None, true) => TrainTarget::Baseline,
                (None, false) => TrainTarget::AllPatches,
            };
            let summaries = cmd_train(&cfg, target, *force, &mut log)?;
            for s in &summaries {
                let note = if s.skipped { "  (resumed)" } else { "" };
                println!(
                    "{}  val MAE {:.3} years  ({} epochs){note}",
                    s.stem, s.final_val_mae, s.epochs_run
                );
            }
        }
        Command::Evaluate { .. } => {
            let report = cmd_evaluate(&cfg, &mut log)?;
            println!("{:<28} {:>6}  {:>10}  {:>6}", "model", "n", "MAE(years)", "R2");
            for row in &report.rows {
                println!(
                    "{:<28} {:>6}  {:>10.3}  {:>6.3}",
                    row.label, row.n_subjects, row.mae_years, row.r2
                );
            }
            println!("report: {}", paths.report_json().display());
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
            let code = match e {
                Error::Config(_) => 2,
                Error::MissingArtifact(_) => 3,
                Error::Numeric(_) => 4,
                Error::InvalidData { .. } | Error::Io { .. } => 1,
            };
            ExitCode::from(code)
        }
    }
}
