//! Training jobs for per-patch and whole-volume age models.
//!
//! Each job is a self-contained stream: model init, per-epoch shuffling, and
//! the optimizer loop depend only on the job's own seed material, so jobs can
//! run in any order or concurrently and still produce identical weights. The
//! loss is always mean squared error on standardized ages; predictions are
//! mapped back to years through the job's [`TargetScaler`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::WeightEntry;
use crate::error::{Error, Result};
use crate::grid::{center_crop, enumerate_patches, extract_patch, GridSpec, PatchRef};
use crate::metrics;
use crate::model::{Model, ResNet3DConfig};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::Subject;
use crate::seeds::{self, tag};
use crate::tensor::{Tape, Tensor};
use crate::volume::{normalize_volume, read_pgv1, Volume};

/// Optimization settings shared by every training job of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub parallel_patch_jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 10,
            learning_rate: 1e-4,
            seed: 0,
            parallel_patch_jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.parallel_patch_jobs == 0 {
            return Err(Error::config("parallel_patch_jobs must be at least 1"));
        }
        Ok(())
    }
}

/// Affine map between ages in years and the standardized training target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    /// Fits mean and population standard deviation on the training ages.
    pub fn fit(ages: &[f64]) -> Result<TargetScaler> {
        if ages.len() < 2 {
            return Err(Error::config(format!(
                "target scaling needs at least two training ages, got {}",
                ages.len()
            )));
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / n;
        if var == 0.0 {
            return Err(Error::numeric(
                "cannot standardize targets: all training ages are identical",
            ));
        }
        Ok(TargetScaler {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn standardize(&self, age_years: f64) -> f64 {
        (age_years - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Provides subjects' scans already normalized over the whole volume and
/// center-cropped to the grid's crop dims, in that order, so patch extraction
/// always sees scan-level statistics.
pub trait CroppedVolumeSource: Sync {
    fn cropped_normalized(&self, subject: &Subject) -> Result<Volume>;
}

/// Reads `PGV1` files from a dataset root, resolving each subject's relative
/// volume path.
#[derive(Debug, Clone)]
pub struct FileSource {
    root: PathBuf,
    crop_dims: [usize; 3],
}

impl FileSource {
    pub fn new(root: impl Into<PathBuf>, grid: &GridSpec) -> FileSource {
        FileSource {
            root: root.into(),
            crop_dims: grid.crop_dims,
        }
    }
}

impl CroppedVolumeSource for FileSource {
    fn cropped_normalized(&self, subject: &Subject) -> Result<Volume> {
        let v = read_pgv1(&self.root.join(&subject.volume_path))?;
        center_crop(&normalize_volume(&v)?, self.crop_dims)
    }
}

/// In-memory volumes keyed by subject id, mainly for tests.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    crop_dims: [usize; 3],
    volumes: BTreeMap<String, Volume>,
}

impl MemorySource {
    pub fn new(grid: &GridSpec) -> MemorySource {
        MemorySource {
            crop_dims: grid.crop_dims,
            volumes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, volume: Volume) {
        self.volumes.insert(id.into(), volume);
    }
}

impl CroppedVolumeSource for MemorySource {
    fn cropped_normalized(&self, subject: &Subject) -> Result<Volume> {
        let v = self
            .volumes
            .get(&subject.id)
            .ok_or_else(|| Error::config(format!("no volume registered for subject {}", subject.id)))?;
        center_crop(&normalize_volume(v)?, self.crop_dims)
    }
}

/// Wraps another source and replaces every voxel outside one kept block with
/// NaN after normalization and cropping. A job that genuinely reads only its
/// own patch region is unaffected by the poisoning, which is how the tests
/// prove patch locality.
#[derive(Debug, Clone)]
pub struct PoisonedSource<S> {
    inner: S,
    keep_offset: [usize; 3],
    keep_size: [usize; 3],
}

impl<S> PoisonedSource<S> {
    pub fn new(inner: S, keep_offset: [usize; 3], keep_size: [usize; 3]) -> PoisonedSource<S> {
        PoisonedSource {
            inner,
            keep_offset,
            keep_size,
        }
    }

    pub fn keeping_patch(inner: S, patch: &PatchRef, grid: &GridSpec) -> PoisonedSource<S> {
        PoisonedSource::new(inner, patch.offset, grid.patch_size)
    }
}

impl<S: CroppedVolumeSource> CroppedVolumeSource for PoisonedSource<S> {
    fn cropped_normalized(&self, subject: &Subject) -> Result<Volume> {
        let mut v = self.inner.cropped_normalized(subject)?;
        let dims = v.dims();
        let [o0, o1, o2] = self.keep_offset;
        let [k0, k1, k2] = self.keep_size;
        for i0 in 0..dims[0] {
            for i1 in 0..dims[1] {
                for i2 in 0..dims[2] {
                    let kept = (o0..o0 + k0).contains(&i0)
                        && (o1..o1 + k1).contains(&i1)
                        && (o2..o2 + k2).contains(&i2);
                    if !kept {
                        v.set(i0, i1, i2, f64::NAN);
                    }
                }
            }
        }
        Ok(v)
    }
}

/// Seed-material tag for a job: the patch index, or a reserved value for the
/// whole-volume baseline.
pub fn job_tag(patch: Option<&PatchRef>) -> u64 {
    patch.map(|p| p.index as u64).unwrap_or(tag::BASELINE)
}

/// Stable artifact stem for a job, shared by checkpoints and logs.
pub fn job_stem(patch: Option<&PatchRef>) -> String {
    match patch {
        Some(p) => format!("patch_{:02}", p.index),
        None => "baseline".to_string(),
    }
}

/// Loads every subject once and returns the model inputs for this job,
/// extracted up front so the training loop never touches the source again.
pub fn gather_inputs<S: CroppedVolumeSource + ?Sized>(
    source: &S,
    subjects: &[Subject],
    grid: &GridSpec,
    patch: Option<&PatchRef>,
) -> Result<(Vec<Vec<f64>>, [usize; 3])> {
    let dims = match patch {
        Some(_) => grid.patch_size,
        None => grid.crop_dims,
    };
    let mut inputs = Vec::with_capacity(subjects.len());
    for subject in subjects {
        let cropped = source.cropped_normalized(subject)?;
        if cropped.dims() != grid.crop_dims {
            return Err(Error::config(format!(
                "source produced dims {:?} for subject {}, grid expects {:?}",
                cropped.dims(),
                subject.id,
                grid.crop_dims
            )));
        }
        let input = match patch {
            Some(p) => extract_patch(&cropped, p, grid)?,
            None => cropped,
        };
        inputs.push(input.into_data());
    }
    Ok((inputs, dims))
}

fn batch_tensor(inputs: &[Vec<f64>], order: &[usize], dims: [usize; 3]) -> Result<Tensor> {
    let voxels = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(order.len() * voxels);
    for &i in order {
        data.extend_from_slice(&inputs[i]);
    }
    Tensor::new(vec![order.len(), 1, dims[0], dims[1], dims[2]], data)
}

/// A trained model plus the target mapping needed to answer in years.
#[derive(Debug)]
pub struct AgePredictor {
    pub model: Model,
    pub scaler: TargetScaler,
}

pub const TARGET_MEAN_ENTRY: &str = "target.mean";
pub const TARGET_STD_ENTRY: &str = "target.std";

impl AgePredictor {
    /// Eval-mode predictions in years, computed in deterministic chunks of
    /// `batch_size` subjects.
    pub fn predict_inputs(
        &self,
        inputs: &[Vec<f64>],
        dims: [usize; 3],
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let idx: Vec<usize> = (0..inputs.len()).collect();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in idx.chunks(batch_size) {
            let batch = batch_tensor(inputs, chunk, dims)?;
            let mut tape = Tape::new();
            let pass = self.model.forward_eval(&mut tape, &batch)?;
            let z = tape.value(pass.output);
            out.extend(z.iter().map(|&v| self.scaler.destandardize(v)));
        }
        Ok(out)
    }

    /// Model weights, running statistics, and target scaling as one flat
    /// entry list for the checkpoint container.
    pub fn to_weight_entries(&self) -> Vec<WeightEntry> {
        let mut entries = self.model.state_dict();
        entries.push((TARGET_MEAN_ENTRY.to_string(), vec![1], vec![self.scaler.mean]));
        entries.push((TARGET_STD_ENTRY.to_string(), vec![1], vec![self.scaler.std]));
        entries
    }

    /// Rebuilds a predictor from checkpoint entries written by
    /// [`AgePredictor::to_weight_entries`].
    pub fn from_weight_entries(cfg: &ResNet3DConfig, entries: &[WeightEntry]) -> Result<AgePredictor> {
        let mut mean = None;
        let mut std = None;
        let mut model_entries = Vec::with_capacity(entries.len());
        for entry in entries {
            let slot = match entry.0.as_str() {
                TARGET_MEAN_ENTRY => &mut mean,
                TARGET_STD_ENTRY => &mut std,
                _ => {
                    model_entries.push(entry.clone());
                    continue;
                }
            };
            if entry.2.len() != 1 {
                return Err(Error::config(format!(
                    "checkpoint entry {} must hold exactly one value, got {}",
                    entry.0,
                    entry.2.len()
                )));
            }
            *slot = Some(entry.2[0]);
        }
        let (mean, std) = match (mean, std) {
            (Some(m), Some(s)) => (m, s),
            _ => {
                return Err(Error::config(format!(
                    "checkpoint is missing the {TARGET_MEAN_ENTRY} or {TARGET_STD_ENTRY} entry"
                )))
            }
        };
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::numeric(format!(
                "checkpoint target scaling is invalid: mean {mean}, std {std}"
            )));
        }
        let mut model = Model::build(cfg.clone())?;
        model.load_state_dict(&model_entries)?;
        Ok(AgePredictor {
            model,
            scaler: TargetScaler { mean, std },
        })
    }
}

/// Everything a finished training job hands back to the pipeline.
#[derive(Debug)]
pub struct JobOutcome {
    pub predictor: AgePredictor,
    pub epochs_run: usize,
    pub val_mae_curve: Vec<f64>,
    pub final_val_mae: f64,
    pub log_lines: Vec<String>,
}

/// Trains one model on the given patch, or on the whole cropped volume when
/// `patch` is `None`. Inputs are extracted before the loop; each epoch
/// shuffles with a stream derived from (seed, job, epoch); validation MAE is
/// recorded every epoch in eval mode; the final-epoch weights are returned.
pub fn train_job<S: CroppedVolumeSource + ?Sized>(
    source: &S,
    train: &[Subject],
    val: &[Subject],
    grid: &GridSpec,
    patch: Option<&PatchRef>,
    base: &ResNet3DConfig,
    tcfg: &TrainConfig,
) -> Result<JobOutcome> {
    tcfg.validate()?;
    grid.validate()?;
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if val.is_empty() {
        return Err(Error::config("validation split is empty"));
    }

    let stem = job_stem(patch);
    let (train_x, dims) = gather_inputs(source, train, grid, patch)?;
    let (val_x, _) = gather_inputs(source, val, grid, patch)?;
    let train_ages: Vec<f64> = train.iter().map(|s| s.age_years).collect();
    let val_ages: Vec<f64> = val.iter().map(|s| s.age_years).collect();
    let scaler = TargetScaler::fit(&train_ages)?;
    let targets: Vec<f64> = train_ages.iter().map(|&a| scaler.standardize(a)).collect();

    let mcfg = ResNet3DConfig {
        input_dims: dims,
        seed: seeds::mix(&[tcfg.seed, job_tag(patch)]),
        ..base.clone()
    };
    let mut model = Model::build(mcfg)?;
    let mut adam = Adam::new(AdamConfig {
        lr: tcfg.learning_rate,
        ..AdamConfig::default()
    });

    let mut log_lines = Vec::new();
    log_lines.push(
        json!({
            "event": "start",
            "job": stem,
            "input_dims": dims,
            "train_subjects": train.len(),
            "val_subjects": val.len(),
            "epochs": tcfg.epochs,
            "batch_size": tcfg.batch_size,
        })
        .to_string(),
    );

    let mut val_mae_curve = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seeds::rng(&[tcfg.seed, tag::SHUFFLE, job_tag(patch), epoch as u64]);
        order.shuffle(&mut rng);

        let mut squared_sum = 0.0;
        for (step, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch = batch_tensor(&train_x, chunk, dims)?;
            let target_values: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let target = Tensor::new(vec![chunk.len(), 1], target_values)?;

            let mut tape = Tape::new();
            let pass = model.forward_train(&mut tape, &batch)?;
            let target_var = tape.leaf(&target);
            let loss = tape.mse_loss(pass.output, target_var)?;
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::numeric(format!(
                    "training loss became non-finite ({loss_value}) in job {stem} at epoch {epoch}, step {step}"
                )));
            }
            squared_sum += loss_value * chunk.len() as f64;

            let grads = tape.backward(loss)?;
            model.apply_gradients(&pass, &grads)?;
            let mut params = model.named_params_mut();
            adam.step(params.iter_mut().map(|(name, t)| (name.as_str(), &mut **t)))?;

            let ids: Vec<&str> = chunk.iter().map(|&i| train[i].id.as_str()).collect();
            log_lines.push(
                json!({"event": "batch", "epoch": epoch, "step": step, "subjects": ids})
                    .to_string(),
            );
        }
        let train_mse_years2 =
            squared_sum / train.len() as f64 * scaler.std * scaler.std;

        let predictor = AgePredictor { model, scaler };
        let val_pred = predictor.predict_inputs(&val_x, dims, tcfg.batch_size)?;
        model = predictor.model;
        let val_mae = metrics::mae(&val_pred, &val_ages)?;
        val_mae_curve.push(val_mae);
        log_lines.push(
            json!({
                "event": "epoch",
                "epoch": epoch,
                "train_mse_years2": train_mse_years2,
                "val_mae_years": val_mae,
            })
            .to_string(),
        );
    }

    let final_val_mae = *val_mae_curve.last().unwrap();
    log_lines.push(
        json!({"event": "done", "job": stem, "final_val_mae_years": final_val_mae}).to_string(),
    );
    Ok(JobOutcome {
        predictor: AgePredictor { model, scaler },
        epochs_run: tcfg.epochs,
        val_mae_curve,
        final_val_mae,
        log_lines,
    })
}

/// Trains the model for one grid patch.
pub fn train_patch_model<S: CroppedVolumeSource + ?Sized>(
    source: &S,
    train: &[Subject],
    val: &[Subject],
    grid: &GridSpec,
    patch: &PatchRef,
    base: &ResNet3DConfig,
    tcfg: &TrainConfig,
) -> Result<JobOutcome> {
    train_job(source, train, val, grid, Some(patch), base, tcfg)
}

/// Trains the whole-volume reference model on the full cropped scan.
pub fn train_baseline<S: CroppedVolumeSource + ?Sized>(
    source: &S,
    train: &[Subject],
    val: &[Subject],
    grid: &GridSpec,
    base: &ResNet3DConfig,
    tcfg: &TrainConfig,
) -> Result<JobOutcome> {
    train_job(source, train, val, grid, None, base, tcfg)
}

/// Runs one training job per patch, in patch order, using up to
/// `parallel_patch_jobs` worker threads when that setting is above one.
/// Results are identical either way because each job is an independent
/// stream.
pub fn run_patch_jobs<S: CroppedVolumeSource + Sync + ?Sized>(
    source: &S,
    train: &[Subject],
    val: &[Subject],
    grid: &GridSpec,
    patches: &[PatchRef],
    base: &ResNet3DConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<JobOutcome>> {
    tcfg.validate()?;
    #[cfg(feature = "parallel")]
    if tcfg.parallel_patch_jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(tcfg.parallel_patch_jobs)
            .build()
            .map_err(|e| {
                Error::config(format!(
                    "cannot start {} patch job workers: {e}",
                    tcfg.parallel_patch_jobs
                ))
            })?;
        return pool.install(|| {
            patches
                .par_iter()
                .map(|p| train_job(source, train, val, grid, Some(p), base, tcfg))
                .collect()
        });
    }
    patches
        .iter()
        .map(|p| train_job(source, train, val, grid, Some(p), base, tcfg))
        .collect()
}

/// Per-subject predictions for one dataset split: one row per subject, one
/// column per model, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub split: String,
    pub subject_ids: Vec<String>,
    pub ages: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
}

impl PredictionTable {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_models(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.subject_ids.len();
        if self.ages.len() != n {
            return Err(Error::config(format!(
                "prediction table has {n} subjects but {} ages",
                self.ages.len()
            )));
        }
        if self.columns.is_empty() {
            return Err(Error::config("prediction table has no model columns"));
        }
        for (j, col) in self.columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::config(format!(
                    "prediction column {j} has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes the table as CSV with a leading `# config_hash=` comment and
    /// the header `subject_id,age_years,y_0,…`.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        self.validate()?;
        let mut out = format!("# config_hash={config_hash}\n");
        out.push_str("subject_id,age_years");
        for j in 0..self.n_models() {
            let _ = write!(out, ",y_{j}");
        }
        out.push('\n');
        for i in 0..self.n_subjects() {
            let _ = write!(out, "{},{}", self.subject_ids[i], self.ages[i]);
            for col in &self.columns {
                let _ = write!(out, ",{}", col[i]);
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`PredictionTable::write_csv`], returning the
    /// embedded config hash alongside the table.
    pub fn read_csv(path: &Path, split: &str) -> Result<(String, PredictionTable)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let hash_line = lines
            .next()
            .ok_or_else(|| Error::invalid(path, "empty prediction CSV"))?;
        let config_hash = hash_line
            .strip_prefix("# config_hash=")
            .ok_or_else(|| {
                Error::invalid(path, "first line must be a # config_hash= comment")
            })?
            .to_string();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid(path, "missing CSV header"))?;
        let mut fields = header.split(',');
        if fields.next() != Some("subject_id") || fields.next() != Some("age_years") {
            return Err(Error::invalid(
                path,
                format!("unexpected CSV header: {header}"),
            ));
        }
        let n_models = fields.count();
        if n_models == 0 {
            return Err(Error::invalid(path, "CSV has no prediction columns"));
        }

        let mut subject_ids = Vec::new();
        let mut ages = Vec::new();
        let mut columns = vec![Vec::new(); n_models];
        for (row, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != n_models + 2 {
                return Err(Error::invalid(
                    path,
                    format!(
                        "row {row} has {} fields, expected {}",
                        parts.len(),
                        n_models + 2
                    ),
                ));
            }
            let parse = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::invalid(path, format!("row {row}: cannot parse {what} from {s:?}"))
                })
            };
            subject_ids.push(parts[0].to_string());
            ages.push(parse(parts[1], "age")?);
            for (j, cell) in parts[2..].iter().enumerate() {
                columns[j].push(parse(cell, "prediction")?);
            }
        }
        let table = PredictionTable {
            split: split.to_string(),
            subject_ids,
            ages,
            columns,
        };
        table.validate()?;
        Ok((config_hash, table))
    }
}

/// Eval-mode predictions for every (subject, patch) pair. `predictors` holds
/// one slot per grid patch; any empty slot makes the whole call fail with the
/// missing indices listed.
pub fn predict_split<S: CroppedVolumeSource + ?Sized>(
    source: &S,
    subjects: &[Subject],
    grid: &GridSpec,
    predictors: &[Option<AgePredictor>],
    batch_size: usize,
    split: &str,
) -> Result<PredictionTable> {
    let patches = enumerate_patches(grid)?;
    if predictors.len() != patches.len() {
        return Err(Error::config(format!(
            "grid defines {} patches but {} predictor slots were given",
            patches.len(),
            predictors.len()
        )));
    }
    let missing: Vec<usize> = predictors
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.is_none().then_some(i))
        .collect();
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "missing trained models for patches {missing:?}"
        )));
    }
    if subjects.is_empty() {
        return Err(Error::config("cannot predict for an empty subject list"));
    }

    let mut columns = Vec::with_capacity(patches.len());
    for (patch, predictor) in patches.iter().zip(predictors) {
        let predictor = predictor.as_ref().unwrap();
        let (inputs, dims) = gather_inputs(source, subjects, grid, Some(patch))?;
        columns.push(predictor.predict_inputs(&inputs, dims, batch_size)?);
    }
    Ok(PredictionTable {
        split: split.to_string(),
        subject_ids: subjects.iter().map(|s| s.id.clone()).collect(),
        ages: subjects.iter().map(|s| s.age_years).collect(),
        columns,
    })
}

/// Single-column prediction table for one job (a patch model, or the
/// whole-volume baseline when `patch` is `None`).
pub fn predict_one<S: CroppedVolumeSource + ?Sized>(
    source: &S,
    subjects: &[Subject],
    grid: &GridSpec,
    predictor: &AgePredictor,
    patch: Option<&PatchRef>,
    batch_size: usize,
    split: &str,
) -> Result<PredictionTable> {
    if subjects.is_empty() {
        return Err(Error::config("cannot predict for an empty subject list"));
    }
    let (inputs, dims) = gather_inputs(source, subjects, grid, patch)?;
    let column = predictor.predict_inputs(&inputs, dims, batch_size)?;
    Ok(PredictionTable {
        split: split.to_string(),
        subject_ids: subjects.iter().map(|s| s.id.clone()).collect(),
        ages: subjects.iter().map(|s| s.age_years).collect(),
        columns: vec![column],
    })
}

/// Collects every subject id mentioned by a `batch` event in job logs, for
/// auditing that held-out subjects never entered a training batch.
pub fn logged_batch_subject_ids<L: AsRef<str>>(log_lines: &[L]) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for line in log_lines {
        let line = line.as_ref();
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::config(format!("job log line is not valid JSON ({e}): {line}")))?;
        if value.get("event").and_then(|v| v.as_str()) != Some("batch") {
            continue;
        }
        let subjects = value
            .get("subjects")
            .and_then(|v| v.as_array())
            .ok_or_else(|| {
                Error::config(format!("batch event without a subjects array: {line}"))
            })?;
        for s in subjects {
            let id = s.as_str().ok_or_else(|| {
                Error::config(format!("batch event with a non-string subject id: {line}"))
            })?;
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}
