//! End-to-end run orchestration: dataset generation, per-patch and baseline
//! training with resumable checkpoints, and the evaluation stage producing
//! prediction tables, fusion models, bias correction, plots, and the report.
//!
//! Every stage runs under one output directory and embeds the run's config
//! hashes in its artifacts; a later stage refuses artifacts whose hashes do
//! not match its own config. Timestamps go to `run.log` and nowhere else, so
//! all other artifacts are byte-identical when a run is repeated.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::bias::{apply_bias, fit_bias, BiasModel};
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{FusionSection, FusionStrategy, ModelSection, PipelineConfig};
use crate::ensemble::{
    apply_linear_fusion, fit_linear_fusion, mean_fuse, select_patches, LinearFusionModel,
    PatchSelection,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{enumerate_patches, GridSpec, PatchRef};
use crate::metrics::{
    build_heatmap, evaluate, export_scatter, mae, null_model, MetricsReport, PatchHeatmap,
};
use crate::phantom::{
    generate_dataset, read_manifest, split_dataset, write_manifest, DatasetSplit, PhantomParams,
    Subject,
};
use crate::trainer::{
    job_stem, logged_batch_subject_ids, predict_one, predict_split, run_patch_jobs, train_job,
    AgePredictor, FileSource, JobOutcome, PredictionTable,
};
use crate::volume::write_pgv1;

pub const BASELINE_STEM: &str = "baseline";

/// Canonical artifact locations under one run's output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> RunPaths {
        RunPaths { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.csv")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn job_log(&self, stem: &str) -> PathBuf {
        self.log_dir().join(format!("{stem}.jsonl"))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn prediction_csv(&self, name: &str) -> PathBuf {
        self.predictions_dir().join(format!("{name}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn report_json(&self) -> PathBuf {
        self.report_dir().join("report.json")
    }

    pub fn run_log(&self) -> PathBuf {
        self.root.join("run.log")
    }
}

/// Append-only progress log. This is the only artifact carrying wall-clock
/// time, which keeps every other output reproducible byte for byte.
pub struct RunLog {
    file: Option<fs::File>,
    echo: bool,
}

impl RunLog {
    /// Opens (appending) the run log and echoes notes to stderr.
    pub fn open(path: &Path) -> Result<RunLog> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RunLog {
            file: Some(file),
            echo: true,
        })
    }

    /// Discards notes; useful in tests that only care about artifacts.
    pub fn silent() -> RunLog {
        RunLog {
            file: None,
            echo: false,
        }
    }

    pub fn note(&mut self, msg: &str) {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "[{secs}] {msg}");
        }
        if self.echo {
            eprintln!("{msg}");
        }
    }
}

fn short_hash(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Generates the phantom dataset under `out_dir/data`. A complete dataset
/// with a matching config hash is reused as-is; a mismatched one is refused
/// unless `force` is set.
pub fn cmd_gen_data(
    cfg: &PipelineConfig,
    force: bool,
    log: &mut RunLog,
) -> Result<Vec<Subject>> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg.resolved_out_dir());
    let data_hash = cfg.data_hash();
    let manifest = paths.manifest();

    if manifest.exists() && !force {
        let (subjects, found_hash) = read_manifest(&manifest).map_err(|e| {
            Error::invalid(
                &manifest,
                format!("unreadable manifest ({e}); pass --force to regenerate"),
            )
        })?;
        if found_hash != data_hash {
            return Err(Error::config(format!(
                "dataset at {} was generated from a different config (hash {} vs {}); \
                 pass --force to regenerate",
                manifest.display(),
                short_hash(&found_hash),
                short_hash(&data_hash)
            )));
        }
        let data_dir = paths.data_dir();
        if subjects.iter().all(|s| data_dir.join(&s.volume_path).exists()) {
            log.note(&format!(
                "dataset already present ({} subjects, hash {}); skipping generation",
                subjects.len(),
                short_hash(&data_hash)
            ));
            return Ok(subjects);
        }
        log.note("dataset manifest found but volumes are incomplete; regenerating");
    }

    let subjects = generate_dataset(cfg.n_subjects, &cfg.phantom, &paths.data_dir(), Exec::default())?;
    write_manifest(&manifest, &subjects, &data_hash)?;
    log.note(&format!(
        "generated {} phantom volumes under {} (hash {})",
        subjects.len(),
        paths.data_dir().display(),
        short_hash(&data_hash)
    ));
    Ok(subjects)
}

/// Reads the manifest, checks it against the config's data hash, and splits
/// the subjects into train/val/test.
fn load_dataset(cfg: &PipelineConfig, paths: &RunPaths) -> Result<(Vec<Subject>, DatasetSplit)> {
    let manifest = paths.manifest();
    if !manifest.exists() {
        return Err(Error::missing(format!(
            "no dataset manifest at {}; run gen-data first",
            manifest.display()
        )));
    }
    let (subjects, found_hash) = read_manifest(&manifest)?;
    let data_hash = cfg.data_hash();
    if found_hash != data_hash {
        return Err(Error::config(format!(
            "dataset at {} was generated from a different config (hash {} vs {}); \
             rerun gen-data --force or fix the config",
            manifest.display(),
            short_hash(&found_hash),
            short_hash(&data_hash)
        )));
    }
    let split = split_dataset(&subjects, cfg.split_ratios, cfg.seed)?;
    Ok((subjects, split))
}

fn resolve_ids(subjects: &[Subject], ids: &[String]) -> Result<Vec<Subject>> {
    let by_id: BTreeMap<&str, &Subject> =
        subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&s| s.clone())
                .ok_or_else(|| Error::config(format!("split references unknown subject {id}")))
        })
        .collect()
}

/// Which models a `train` invocation should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Patch(usize),
    AllPatches,
    Baseline,
}

/// Outcome of one training job as seen by the caller.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub stem: String,
    pub patch_index: Option<usize>,
    pub epochs_run: usize,
    pub final_val_mae: f64,
    pub skipped: bool,
}

/// Checks whether a valid, config-matching checkpoint already exists.
/// `Ok(Some(meta))` means the job can be skipped; `Ok(None)` means there is
/// nothing on disk. A checkpoint that exists but is unreadable or belongs to
/// a different config is an error unless `force` is set, in which case it is
/// treated as absent and overwritten.
fn reusable_checkpoint(
    cfg: &PipelineConfig,
    dir: &Path,
    stem: &str,
    patch_index: Option<usize>,
    hashes: (&str, &str),
    force: bool,
) -> Result<Option<CheckpointMeta>> {
    if !checkpoint::exists(dir, stem) {
        return Ok(None);
    }
    if force {
        return Ok(None);
    }
    let (data_hash, train_hash) = hashes;
    let (meta, entries) = checkpoint::load(dir, stem).map_err(|e| {
        Error::invalid(
            &checkpoint::weights_path(dir, stem),
            format!("checkpoint {stem} cannot be read ({e}); pass --force to retrain"),
        )
    })?;
    if meta.data_hash != data_hash
        || meta.train_hash != train_hash
        || meta.patch_index != patch_index
        || meta.grid != cfg.grid
    {
        return Err(Error::config(format!(
            "checkpoint {stem} was trained under a different config \
             (train hash {} vs {}); pass --force to retrain",
            short_hash(&meta.train_hash),
            short_hash(train_hash)
        )));
    }
    AgePredictor::from_weight_entries(&meta.model, &entries).map_err(|e| {
        Error::invalid(
            &checkpoint::weights_path(dir, stem),
            format!("checkpoint {stem} does not load ({e}); pass --force to retrain"),
        )
    })?;
    Ok(Some(meta))
}

fn persist_job(
    paths: &RunPaths,
    cfg: &PipelineConfig,
    hashes: (&str, &str),
    patch: Option<&PatchRef>,
    outcome: &JobOutcome,
) -> Result<TrainSummary> {
    let stem = job_stem(patch);
    let log_path = paths.job_log(&stem);
    let mut text = outcome.log_lines.join("\n");
    text.push('\n');
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;

    let meta = CheckpointMeta {
        data_hash: hashes.0.to_string(),
        train_hash: hashes.1.to_string(),
        patch_index: patch.map(|p| p.index),
        grid: cfg.grid,
        model: outcome.predictor.model.config().clone(),
        train: cfg.train,
        epochs_run: outcome.epochs_run,
        final_val_mae: outcome.final_val_mae,
        val_mae_curve: outcome.val_mae_curve.clone(),
    };
    checkpoint::save(
        &paths.checkpoint_dir(),
        &stem,
        &outcome.predictor.to_weight_entries(),
        &meta,
    )?;
    Ok(TrainSummary {
        stem,
        patch_index: patch.map(|p| p.index),
        epochs_run: outcome.epochs_run,
        final_val_mae: outcome.final_val_mae,
        skipped: false,
    })
}

/// Trains the requested models, skipping jobs whose checkpoints already match
/// this config (resume). Existing checkpoints that are corrupt or belong to a
/// different config abort unless `force` is set.
pub fn cmd_train(
    cfg: &PipelineConfig,
    target: TrainTarget,
    force: bool,
    log: &mut RunLog,
) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg.resolved_out_dir());
    let (subjects, split) = load_dataset(cfg, &paths)?;
    let train_subjects = resolve_ids(&subjects, &split.train_ids)?;
    let val_subjects = resolve_ids(&subjects, &split.val_ids)?;

    let patches = enumerate_patches(&cfg.grid)?;
    let requested: Vec<Option<PatchRef>> = match target {
        TrainTarget::Patch(i) => {
            let patch = *patches.get(i).ok_or_else(|| {
                Error::config(format!(
                    "patch index {i} is out of range; the grid has {} patches",
                    patches.len()
                ))
            })?;
            vec![Some(patch)]
        }
        TrainTarget::AllPatches => patches.iter().copied().map(Some).collect(),
        TrainTarget::Baseline => vec![None],
    };

    let ck_dir = paths.checkpoint_dir();
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let log_dir = paths.log_dir();
    fs::create_dir_all(&log_dir).map_err(|e| Error::io(&log_dir, e))?;

    let data_hash = cfg.data_hash();
    let train_hash = cfg.train_hash();
    let hashes = (data_hash.as_str(), train_hash.as_str());

    let mut summaries = Vec::new();
    let mut to_run: Vec<Option<PatchRef>> = Vec::new();
    for job in requested {
        let stem = job_stem(job.as_ref());
        let index = job.as_ref().map(|p| p.index);
        match reusable_checkpoint(cfg, &ck_dir, &stem, index, hashes, force)? {
            Some(meta) => {
                log.note(&format!("{stem}: checkpoint matches this config; skipping"));
                summaries.push(TrainSummary {
                    stem,
                    patch_index: index,
                    epochs_run: meta.epochs_run,
                    final_val_mae: meta.final_val_mae,
                    skipped: true,
                });
            }
            None => to_run.push(job),
        }
    }

    if to_run.is_empty() {
        log.note("nothing to train; all requested checkpoints are up to date");
        return Ok(summaries);
    }

    let source = FileSource::new(paths.data_dir(), &cfg.grid);
    let patch_jobs: Vec<PatchRef> = to_run.iter().flatten().copied().collect();
    let base = cfg.model.base_config(cfg.grid.patch_size);

    if !patch_jobs.is_empty() {
        log.note(&format!(
            "training {} patch model(s) with {} worker(s)",
            patch_jobs.len(),
            cfg.train.parallel_patch_jobs.max(1)
        ));
        let outcomes = run_patch_jobs(
            &source,
            &train_subjects,
            &val_subjects,
            &cfg.grid,
            &patch_jobs,
            &base,
            &cfg.train,
        )?;
        for (patch, outcome) in patch_jobs.iter().zip(&outcomes) {
            let summary = persist_job(&paths, cfg, hashes, Some(patch), outcome)?;
            log.note(&format!(
                "{}: {} epochs, final val MAE {:.3} years",
                summary.stem, summary.epochs_run, summary.final_val_mae
            ));
            summaries.push(summary);
        }
    }

    if to_run.iter().any(|j| j.is_none()) {
        log.note("training whole-volume baseline");
        let base = cfg.model.base_config(cfg.grid.crop_dims);
        let outcome = train_job(
            &source,
            &train_subjects,
            &val_subjects,
            &cfg.grid,
            None,
            &base,
            &cfg.train,
        )?;
        let summary = persist_job(&paths, cfg, hashes, None, &outcome)?;
        log.note(&format!(
            "{}: {} epochs, final val MAE {:.3} years",
            summary.stem, summary.epochs_run, summary.final_val_mae
        ));
        summaries.push(summary);
    }

    summaries.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(summaries)
}

/// Per-split performance of one mean-fusion variant. The bias fields are
/// present when bias correction is enabled for the run.
#[derive(Debug, Clone, Serialize)]
pub struct FusionSummary {
    pub selected_indices: Vec<usize>,
    pub val_mae_years: f64,
    pub test_mae_years: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mae_corrected_years: Option<f64>,
}

/// Linear fusion model plus its per-split performance.
#[derive(Debug, Clone, Serialize)]
pub struct LinearFusionSummary {
    pub model: LinearFusionModel,
    pub val_mae_years: f64,
    pub test_mae_years: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mae_corrected_years: Option<f64>,
}

/// Whole-volume baseline performance, present when its checkpoint exists.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineSummary {
    pub val_mae_years: f64,
    pub test_mae_years: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mae_corrected_years: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScatterSummary {
    pub source: String,
    pub fitted_slope: f64,
    pub fitted_intercept: f64,
}

/// Result of auditing the training batch logs against the held-out splits.
#[derive(Debug, Clone, Serialize)]
pub struct HygieneAudit {
    pub files_audited: Vec<String>,
    pub distinct_training_ids: usize,
    pub val_ids_in_training: Vec<String>,
    pub test_ids_in_training: Vec<String>,
    pub clean: bool,
}

/// The config fields that shape results, echoed into the report. The output
/// directory and worker count are excluded: they do not affect any numbers
/// and would break byte-level comparability between equivalent runs.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub seed: u64,
    pub n_subjects: usize,
    pub split_ratios: [f64; 3],
    pub bias_correct: bool,
    pub phantom: PhantomParams,
    pub grid: GridSpec,
    pub model: ModelSection,
    pub train: TrainEcho,
    pub fusion: FusionSection,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainEcho {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

/// Everything `evaluate` measures, serialized as `report/report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub data_hash: String,
    pub train_hash: String,
    pub split_sizes: [usize; 3],
    pub null_prediction_years: f64,
    pub rows: Vec<MetricsReport>,
    pub best_patch_index: usize,
    pub worst_patch_index: usize,
    pub per_patch_val_mae: Vec<f64>,
    pub per_patch_test_mae: Vec<f64>,
    pub selection: PatchSelection,
    pub mean_fusion_all: FusionSummary,
    pub mean_fusion_selected: FusionSummary,
    pub linear_fusion_all: LinearFusionSummary,
    pub linear_fusion_selected: LinearFusionSummary,
    pub baseline: Option<BaselineSummary>,
    pub scatter: ScatterSummary,
    pub heatmap: PatchHeatmap,
    pub hygiene: HygieneAudit,
    pub config: ConfigEcho,
}

fn audit_hygiene(paths: &RunPaths, split: &DatasetSplit) -> Result<HygieneAudit> {
    let log_dir = paths.log_dir();
    let mut files: Vec<PathBuf> = match fs::read_dir(&log_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();

    let mut names = Vec::new();
    let mut logged = std::collections::BTreeSet::new();
    for file in &files {
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let lines: Vec<&str> = text.lines().collect();
        logged.extend(logged_batch_subject_ids(&lines)?);
        names.push(
            file.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }

    let overlap = |ids: &[String]| -> Vec<String> {
        ids.iter().filter(|id| logged.contains(*id)).cloned().collect()
    };
    let val_ids_in_training = overlap(&split.val_ids);
    let test_ids_in_training = overlap(&split.test_ids);
    let clean = val_ids_in_training.is_empty() && test_ids_in_training.is_empty();
    Ok(HygieneAudit {
        files_audited: names,
        distinct_training_ids: logged.len(),
        val_ids_in_training,
        test_ids_in_training,
        clean,
    })
}

fn load_predictor(
    cfg: &PipelineConfig,
    dir: &Path,
    stem: &str,
    patch_index: Option<usize>,
    hashes: (&str, &str),
) -> Result<AgePredictor> {
    let (meta, entries) = checkpoint::load(dir, stem)?;
    if meta.data_hash != hashes.0 || meta.train_hash != hashes.1 {
        return Err(Error::config(format!(
            "checkpoint {stem} was trained under a different config (train hash {} vs {}); \
             retrain with --force",
            short_hash(&meta.train_hash),
            short_hash(hashes.1)
        )));
    }
    if meta.patch_index != patch_index || meta.grid != cfg.grid {
        return Err(Error::config(format!(
            "checkpoint {stem} belongs to a different grid placement; retrain with --force"
        )));
    }
    AgePredictor::from_weight_entries(&meta.model, &entries)
}

fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::config(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every patch checkpoint (and the baseline when present), predicts the
/// validation and test splits, fits selection/fusion/bias on validation data,
/// and writes prediction CSVs, the heatmap artifacts, the scatter export, and
/// `report/report.json`.
pub fn cmd_evaluate(cfg: &PipelineConfig, log: &mut RunLog) -> Result<EvalReport> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg.resolved_out_dir());
    let (subjects, split) = load_dataset(cfg, &paths)?;
    let train_subjects = resolve_ids(&subjects, &split.train_ids)?;
    let val_subjects = resolve_ids(&subjects, &split.val_ids)?;
    let test_subjects = resolve_ids(&subjects, &split.test_ids)?;

    let data_hash = cfg.data_hash();
    let train_hash = cfg.train_hash();
    let hashes = (data_hash.as_str(), train_hash.as_str());
    let patches = enumerate_patches(&cfg.grid)?;
    let ck_dir = paths.checkpoint_dir();

    let missing: Vec<usize> = patches
        .iter()
        .filter(|p| !checkpoint::exists(&ck_dir, &job_stem(Some(p))))
        .map(|p| p.index)
        .collect();
    if !missing.is_empty() {
        return Err(Error::missing(format!(
            "no trained checkpoints for patches {missing:?} under {}; \
             run train --all-patches first",
            ck_dir.display()
        )));
    }

    let mut predictors: Vec<Option<AgePredictor>> = Vec::with_capacity(patches.len());
    for patch in &patches {
        let stem = job_stem(Some(patch));
        predictors.push(Some(load_predictor(
            cfg,
            &ck_dir,
            &stem,
            Some(patch.index),
            hashes,
        )?));
    }
    let baseline = if checkpoint::exists(&ck_dir, BASELINE_STEM) {
        Some(load_predictor(cfg, &ck_dir, BASELINE_STEM, None, hashes)?)
    } else {
        log.note("no baseline checkpoint; report will omit the baseline rows");
        None
    };

    let source = FileSource::new(paths.data_dir(), &cfg.grid);
    let batch = cfg.train.batch_size;
    let val_table = predict_split(&source, &val_subjects, &cfg.grid, &predictors, batch, "val")?;
    let test_table = predict_split(&source, &test_subjects, &cfg.grid, &predictors, batch, "test")?;

    let pred_dir = paths.predictions_dir();
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    val_table.write_csv(&paths.prediction_csv("val"), &train_hash)?;
    test_table.write_csv(&paths.prediction_csv("test"), &train_hash)?;

    let baseline_tables = baseline
        .as_ref()
        .map(|predictor| -> Result<(PredictionTable, PredictionTable)> {
            let v = predict_one(&source, &val_subjects, &cfg.grid, predictor, None, batch, "val")?;
            let t =
                predict_one(&source, &test_subjects, &cfg.grid, predictor, None, batch, "test")?;
            v.write_csv(&paths.prediction_csv("baseline_val"), &train_hash)?;
            t.write_csv(&paths.prediction_csv("baseline_test"), &train_hash)?;
            Ok((v, t))
        })
        .transpose()?;

    let train_ages: Vec<f64> = train_subjects.iter().map(|s| s.age_years).collect();
    let val_ages: Vec<f64> = val_subjects.iter().map(|s| s.age_years).collect();
    let test_ages: Vec<f64> = test_subjects.iter().map(|s| s.age_years).collect();

    let per_patch_val_mae: Vec<f64> = (0..patches.len())
        .map(|j| mae(val_table.column(j), &val_ages))
        .collect::<Result<_>>()?;
    let per_patch_test_mae: Vec<f64> = (0..patches.len())
        .map(|j| mae(test_table.column(j), &test_ages))
        .collect::<Result<_>>()?;

    let selection = select_patches(&per_patch_val_mae, cfg.fusion.threshold_years)?;
    let everything = select_patches(&per_patch_val_mae, f64::INFINITY)?;

    let correct = |val_pred: &[f64],
                   test_pred: &[f64]|
     -> Result<(Option<BiasModel>, Option<Vec<f64>>, Option<f64>)> {
        if !cfg.bias_correct {
            return Ok((None, None, None));
        }
        let model = fit_bias(val_pred, &val_ages)?.labeled("val");
        let corrected = apply_bias(&model, test_pred, &test_ages)?;
        let corrected_mae = mae(&corrected, &test_ages)?;
        Ok((Some(model), Some(corrected), Some(corrected_mae)))
    };

    let fuse_mean = |sel: &PatchSelection| -> Result<(FusionSummary, Vec<f64>, Option<Vec<f64>>)> {
        let val_pred = mean_fuse(&val_table, &sel.selected_indices)?;
        let test_pred = mean_fuse(&test_table, &sel.selected_indices)?;
        let (bias, corrected, corrected_mae) = correct(&val_pred, &test_pred)?;
        let summary = FusionSummary {
            selected_indices: sel.selected_indices.clone(),
            val_mae_years: mae(&val_pred, &val_ages)?,
            test_mae_years: mae(&test_pred, &test_ages)?,
            bias,
            test_mae_corrected_years: corrected_mae,
        };
        Ok((summary, test_pred, corrected))
    };
    let (mean_fusion_all, _, _) = fuse_mean(&everything)?;
    let (mean_fusion_selected, mean_sel_test, mean_sel_corrected) = fuse_mean(&selection)?;

    let fuse_linear =
        |sel: &PatchSelection| -> Result<(LinearFusionSummary, Vec<f64>, Option<Vec<f64>>)> {
            let model = fit_linear_fusion(&val_table, sel, cfg.fusion.ridge)?;
            let val_pred = apply_linear_fusion(&model, &val_table)?;
            let test_pred = apply_linear_fusion(&model, &test_table)?;
            let (bias, corrected, corrected_mae) = correct(&val_pred, &test_pred)?;
            let summary = LinearFusionSummary {
                val_mae_years: mae(&val_pred, &val_ages)?,
                test_mae_years: mae(&test_pred, &test_ages)?,
                model,
                bias,
                test_mae_corrected_years: corrected_mae,
            };
            Ok((summary, test_pred, corrected))
        };
    let (linear_fusion_all, linear_all_test, linear_all_corrected) = fuse_linear(&everything)?;
    let (linear_fusion_selected, _, _) = fuse_linear(&selection)?;

    let mut baseline_corrected_test = None;
    let baseline_summary = match &baseline_tables {
        Some((bval, btest)) => {
            let (bias, corrected, corrected_mae) = correct(bval.column(0), btest.column(0))?;
            baseline_corrected_test = corrected;
            Some(BaselineSummary {
                val_mae_years: mae(bval.column(0), &val_ages)?,
                test_mae_years: mae(btest.column(0), &test_ages)?,
                bias,
                test_mae_corrected_years: corrected_mae,
            })
        }
        None => None,
    };

    let null_prediction = null_model(&train_ages)?;
    let null_test = vec![null_prediction; test_ages.len()];

    let best_patch_index = argmin(&per_patch_val_mae);
    let worst_patch_index = argmax(&per_patch_val_mae);

    let mut rows = Vec::new();
    if let Some((_, btest)) = &baseline_tables {
        rows.push(evaluate("baseline", btest.column(0), &test_ages)?);
    }
    rows.push(evaluate("null_model", &null_test, &test_ages)?);
    rows.push(evaluate(
        "best_single_patch",
        test_table.column(best_patch_index),
        &test_ages,
    )?);
    rows.push(evaluate(
        "worst_single_patch",
        test_table.column(worst_patch_index),
        &test_ages,
    )?);
    rows.push(evaluate("mean_fusion_selected", &mean_sel_test, &test_ages)?);
    rows.push(evaluate("linear_fusion_all", &linear_all_test, &test_ages)?);
    if let Some(corrected) = &baseline_corrected_test {
        rows.push(evaluate("baseline_corrected", corrected, &test_ages)?);
    }
    if let Some(corrected) = &linear_all_corrected {
        rows.push(evaluate("linear_fusion_all_corrected", corrected, &test_ages)?);
    }

    let (scatter_pred, scatter_source) = match cfg.fusion.strategy {
        FusionStrategy::Linear => match &linear_all_corrected {
            Some(c) => (c.clone(), "linear_fusion_all_corrected"),
            None => (linear_all_test.clone(), "linear_fusion_all"),
        },
        FusionStrategy::Mean => match &mean_sel_corrected {
            Some(c) => (c.clone(), "mean_fusion_selected_corrected"),
            None => (mean_sel_test.clone(), "mean_fusion_selected"),
        },
    };

    let report_dir = paths.report_dir();
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;

    let heatmap = build_heatmap(&cfg.grid, &per_patch_test_mae)?;
    let overlay = heatmap.overlay_volume()?;
    write_pgv1(&report_dir.join("heatmap_overlay.pgv"), &overlay)?;
    heatmap
        .render_transverse()?
        .write(&report_dir.join("heatmap_transverse.ppm"))?;
    heatmap
        .render_sagittal()?
        .write(&report_dir.join("heatmap_sagittal.ppm"))?;

    let (slope, intercept) = export_scatter(
        &report_dir.join("scatter_test.csv"),
        &report_dir.join("scatter_test.svg"),
        &scatter_pred,
        &test_ages,
    )?;

    let hygiene = audit_hygiene(&paths, &split)?;
    if !hygiene.clean {
        log.note(&format!(
            "WARNING: held-out subjects appeared in training batches: val {:?}, test {:?}",
            hygiene.val_ids_in_training, hygiene.test_ids_in_training
        ));
    }

    let report = EvalReport {
        data_hash,
        train_hash,
        split_sizes: [
            train_subjects.len(),
            val_subjects.len(),
            test_subjects.len(),
        ],
        null_prediction_years: null_prediction,
        rows,
        best_patch_index,
        worst_patch_index,
        per_patch_val_mae,
        per_patch_test_mae,
        selection,
        mean_fusion_all,
        mean_fusion_selected,
        linear_fusion_all,
        linear_fusion_selected,
        baseline: baseline_summary,
        scatter: ScatterSummary {
            source: scatter_source.to_string(),
            fitted_slope: slope,
            fitted_intercept: intercept,
        },
        heatmap,
        hygiene,
        config: ConfigEcho {
            seed: cfg.seed,
            n_subjects: cfg.n_subjects,
            split_ratios: cfg.split_ratios,
            bias_correct: cfg.bias_correct,
            phantom: cfg.phantom.clone(),
            grid: cfg.grid,
            model: cfg.model.clone(),
            train: TrainEcho {
                batch_size: cfg.train.batch_size,
                epochs: cfg.train.epochs,
                learning_rate: cfg.train.learning_rate,
            },
            fusion: cfg.fusion.clone(),
        },
    };
    write_report_json(&paths.report_json(), &report)?;
    log.note(&format!(
        "evaluation complete: {} report rows, best patch {} (test MAE {:.3}), report at {}",
        report.rows.len(),
        best_patch_index,
        report.per_patch_test_mae[best_patch_index],
        paths.report_json().display()
    ));
    Ok(report)
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

fn argmax(values: &[f64]) -> usize {
    let mut worst = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[worst] {
            worst = i;
        }
    }
    worst
}
