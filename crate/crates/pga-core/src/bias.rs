//! Age-bias correction for brain-age predictions.
//!
//! Predictions systematically drift toward the training mean, which shows up
//! as a linear trend of the delta (predicted minus chronological age) against
//! chronological age. The correction fits that trend on one split and
//! subtracts the fitted line wherever it is applied. The regressor is always
//! chronological age, never the prediction itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::simple_linear_fit;

/// Fitted delta trend: `delta ≈ alpha * chronological + beta`, together with
/// a record of which split it was fitted on and how many subjects went in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    pub alpha: f64,
    pub beta: f64,
    pub fit_set: String,
    pub fit_count: usize,
}

impl BiasModel {
    /// Tags the model with the name of the split it was fitted on.
    pub fn labeled(mut self, fit_set: &str) -> BiasModel {
        self.fit_set = fit_set.to_string();
        self
    }
}

fn check_pair(predicted: &[f64], chronological: &[f64]) -> Result<()> {
    if predicted.len() != chronological.len() {
        return Err(Error::config(format!(
            "bias correction needs matching vectors, got {} predictions and {} ages",
            predicted.len(),
            chronological.len()
        )));
    }
    Ok(())
}

/// Fits the delta trend by simple least squares on at least three subjects.
pub fn fit_bias(predicted: &[f64], chronological: &[f64]) -> Result<BiasModel> {
    check_pair(predicted, chronological)?;
    if predicted.len() < 3 {
        return Err(Error::config(format!(
            "bias fit needs at least three subjects, got {}",
            predicted.len()
        )));
    }
    let delta: Vec<f64> = predicted
        .iter()
        .zip(chronological)
        .map(|(&p, &c)| p - c)
        .collect();
    let (alpha, beta) = simple_linear_fit(chronological, &delta)?;
    Ok(BiasModel {
        alpha,
        beta,
        fit_set: String::new(),
        fit_count: predicted.len(),
    })
}

/// Subtracts the fitted trend: `corrected = predicted - (alpha * chron + beta)`.
pub fn apply_bias(model: &BiasModel, predicted: &[f64], chronological: &[f64]) -> Result<Vec<f64>> {
    check_pair(predicted, chronological)?;
    Ok(predicted
        .iter()
        .zip(chronological)
        .map(|(&p, &c)| p - (model.alpha * c + model.beta))
        .collect())
}
