//! Run configuration: one TOML file describing data, grid, model, training,
//! fusion, and reporting, plus the content hashes that tie artifacts from
//! different pipeline stages together.
//!
//! Two hashes matter. The data hash covers everything that determines the
//! generated dataset (master seed, subject count, phantom parameters); the
//! train hash additionally covers the split, grid, model topology, and
//! optimizer settings. Output location and worker counts are deliberately
//! excluded so moving a run or changing parallelism never invalidates its
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::float_or_inf;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, TilingMode};
use crate::model::ResNet3DConfig;
use crate::phantom::PhantomParams;
use crate::trainer::TrainConfig;

/// Model topology as written in config files. Input dims and the init seed
/// are not part of it: every job derives those from its patch and the master
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub norm_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ResNet3DConfig::default();
        ModelSection {
            stem_channels: base.stem_channels,
            stage_channels: base.stage_channels,
            blocks_per_stage: base.blocks_per_stage,
            norm_epsilon: base.norm_epsilon,
        }
    }
}

impl ModelSection {
    /// Expands the section into a full model config for the given input.
    /// The seed is a placeholder; training jobs overwrite it.
    pub fn base_config(&self, input_dims: [usize; 3]) -> ResNet3DConfig {
        ResNet3DConfig {
            input_dims,
            stem_channels: self.stem_channels,
            stage_channels: self.stage_channels.clone(),
            blocks_per_stage: self.blocks_per_stage.clone(),
            norm_epsilon: self.norm_epsilon,
            seed: 0,
        }
    }
}

/// Which fused predictor is the run's headline model; the evaluation stage
/// always measures both, this only chooses the one the scatter export uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Mean,
    Linear,
}

/// Patch selection and meta-regression settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub strategy: FusionStrategy,
    /// Validation MAE cutoff for patch selection; the string "inf" keeps
    /// every patch.
    #[serde(with = "float_or_inf")]
    pub threshold_years: f64,
    /// Optional ridge penalty for the linear fusion fit; unset means plain
    /// least squares.
    pub ridge: Option<f64>,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            strategy: FusionStrategy::Linear,
            threshold_years: f64::INFINITY,
            ridge: None,
        }
    }
}

/// Everything one run needs, as parsed from TOML. The master `seed` drives
/// phantom generation, the split, model init, and batch shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub split_ratios: [f64; 3],
    pub out_dir: PathBuf,
    pub bias_correct: bool,
    pub phantom: PhantomParams,
    pub grid: GridSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fusion: FusionSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let phantom = PhantomParams::default();
        PipelineConfig {
            seed: phantom.seed,
            n_subjects: 200,
            split_ratios: [0.8, 0.15, 0.05],
            out_dir: PathBuf::from("runs/default"),
            bias_correct: true,
            grid: GridSpec {
                source_dims: phantom.volume_dims,
                crop_dims: phantom.volume_dims,
                patch_size: [32, 32, 32],
                stride: [19, 28, 19],
                mode: TilingMode::Exact,
            },
            phantom,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            fusion: FusionSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML file and finalizes it. Unknown keys are rejected so a
    /// typo cannot silently fall back to a default.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Propagates the master seed into the stage configs and validates the
    /// result. Call after any programmatic field changes as well.
    pub fn finalize(&mut self) -> Result<()> {
        self.phantom.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.grid.source_dims != self.phantom.volume_dims {
            return Err(Error::config(format!(
                "grid source dims {:?} must match phantom volume dims {:?}",
                self.grid.source_dims, self.phantom.volume_dims
            )));
        }
        self.grid.validate()?;
        self.train.validate()?;
        self.model.base_config(self.grid.patch_size).validate()?;
        self.model.base_config(self.grid.crop_dims).validate()?;
        if self.fusion.threshold_years.is_nan() {
            return Err(Error::config("fusion threshold must not be NaN"));
        }
        if let Some(lambda) = self.fusion.ridge {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::config(format!(
                    "ridge penalty must be positive and finite, got {lambda}"
                )));
            }
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::config(format!(
                "split ratios must be non-negative and sum to 1, got {:?}",
                self.split_ratios
            )));
        }
        Ok(())
    }

    /// Output directory with the `PGA_OUT_DIR` environment variable applied:
    /// a relative `out_dir` is joined under that root when the variable is
    /// set, an absolute one is used as-is.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if self.out_dir.is_absolute() {
            return self.out_dir.clone();
        }
        match std::env::var_os("PGA_OUT_DIR") {
            Some(root) => PathBuf::from(root).join(&self.out_dir),
            None => self.out_dir.clone(),
        }
    }

    /// Hash over everything that determines the dataset on disk.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataHashInput<'a> {
            seed: u64,
            n_subjects: usize,
            phantom: &'a PhantomParams,
        }
        sha_hex(
            serde_json::to_string(&DataHashInput {
                seed: self.seed,
                n_subjects: self.n_subjects,
                phantom: &self.phantom,
            })
            .expect("config serialization cannot fail")
            .as_bytes(),
        )
    }

    /// Hash over the dataset plus everything that determines training:
    /// split, grid, model topology, and optimizer settings. Worker counts
    /// are excluded because they do not change results.
    pub fn train_hash(&self) -> String {
        #[derive(Serialize)]
        struct TrainHashInput<'a> {
            data_hash: String,
            split_ratios: [f64; 3],
            grid: &'a GridSpec,
            model: &'a ModelSection,
            batch_size: usize,
            epochs: usize,
            learning_rate: f64,
            seed: u64,
        }
        sha_hex(
            serde_json::to_string(&TrainHashInput {
                data_hash: self.data_hash(),
                split_ratios: self.split_ratios,
                grid: &self.grid,
                model: &self.model,
                batch_size: self.train.batch_size,
                epochs: self.train.epochs,
                learning_rate: self.train.learning_rate,
                seed: self.train.seed,
            })
            .expect("config serialization cannot fail")
            .as_bytes(),
        )
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
