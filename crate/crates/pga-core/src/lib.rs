//! Patch-grid age regression on volumetric images.
//!
//! The pipeline generates synthetic aging phantom volumes, trains one small
//! 3D residual regression network per fixed grid patch (plus an optional
//! whole-volume baseline), fuses the per-patch predictions, applies a linear
//! age-bias correction, and reports accuracy metrics with patch-level spatial
//! breakdowns.
//!
//! Modules build bottom-up: [`tensor`] provides the autodiff core, [`volume`]
//! and [`grid`] the data geometry, [`phantom`] the synthetic cohort,
//! [`model`]/[`optim`]/[`trainer`] the learning stack, and
//! [`ensemble`]/[`bias`]/[`metrics`]/[`pipeline`] the evaluation layers the
//! CLI drives.

pub mod bias;
pub mod checkpoint;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod grid;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod numcheck;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod seeds;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
