//! Adam optimizer with bias-corrected first and second moments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step counter plus per-parameter moment buffers keyed by
/// parameter name, created lazily on first update.
#[derive(Debug, Default)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every `(name, tensor)` pair using the gradient
    /// attached to the tensor. All listed parameters must carry a finite
    /// gradient; violations are reported by parameter name.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        self.t += 1;
        let t = self.t;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, tensor) in params {
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::numeric(format!("parameter {name} has no gradient")))?
                .to_vec();
            if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {name} at element {pos}"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::config(format!(
                    "parameter {name} changed size: moments hold {}, gradient has {}",
                    m.len(),
                    grad.len()
                )));
            }
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
