//! Forward/backward math for the non-convolution ops. These are pure slice
//! functions; graph wiring and gradient routing live in [`super::tape`].

use crate::error::{Error, Result};

/// Per-channel running statistics for batch normalization. `count` tracks how
/// many batches have been folded in; evaluation mode refuses to run before the
/// first one.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            count: 0,
        }
    }
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &[f64], gout: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(gout)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Training-mode batch norm over `[n, c, s]`-shaped data (channel dim second,
/// `s` = flattened spatial extent). Normalizes with biased batch variance,
/// folds the unbiased variance into the running estimates, and returns
/// `(y, batch_mean, batch_invstd)` for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_train(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    momentum: f64,
    running: &mut RunningStats,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let m = n * s;
    if m < 2 {
        return Err(Error::numeric(format!(
            "batch norm training requires at least 2 values per channel, got {m}"
        )));
    }
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; c];
    let mut invstds = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for &v in &x[base..base + s] {
                sum += v;
            }
        }
        let mean = sum / m as f64;
        let mut sq = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for &v in &x[base..base + s] {
                sq += (v - mean) * (v - mean);
            }
        }
        let var_biased = sq / m as f64;
        let var_unbiased = sq / (m - 1) as f64;
        let invstd = 1.0 / (var_biased + eps).sqrt();
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                y[i] = gamma[ch] * ((x[i] - mean) * invstd) + beta[ch];
            }
        }
        running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mean;
        running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * var_unbiased;
        means[ch] = mean;
        invstds[ch] = invstd;
    }
    running.count += 1;
    Ok((y, means, invstds))
}

/// Evaluation-mode batch norm: normalizes with the running estimates. Returns
/// `(y, mean, invstd)` with the stats treated as constants.
pub fn bn_forward_eval(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    running: &RunningStats,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if running.count == 0 {
        return Err(Error::numeric(
            "batch norm evaluated before any training batch updated its running statistics",
        ));
    }
    let mut y = vec![0.0; x.len()];
    let invstds: Vec<f64> = running.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                y[i] = gamma[ch] * ((x[i] - running.mean[ch]) * invstds[ch]) + beta[ch];
            }
        }
    }
    Ok((y, running.mean.clone(), invstds))
}

/// Batch norm backward. In training mode the saved mean/invstd are functions
/// of the batch and their gradient paths are included; in eval mode they are
/// constants and only the affine path remains. Returns `(gx, ggamma, gbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    mean: &[f64],
    invstd: &[f64],
    training: bool,
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gxhat = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                let xhat = (x[i] - mean[ch]) * invstd[ch];
                sum_g += gout[i];
                sum_gxhat += gout[i] * xhat;
            }
        }
        ggamma[ch] = sum_gxhat;
        gbeta[ch] = sum_g;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                let xhat = (x[i] - mean[ch]) * invstd[ch];
                gx[i] = if training {
                    gamma[ch] * invstd[ch] * (gout[i] - sum_g / m - xhat * sum_gxhat / m)
                } else {
                    gamma[ch] * invstd[ch] * gout[i]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Mean over the spatial extent: `[n, c, s]` -> `[n, c]`.
pub fn gap_forward(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * c];
    for (nc, out) in y.iter_mut().enumerate() {
        let base = nc * s;
        let mut sum = 0.0;
        for &v in &x[base..base + s] {
            sum += v;
        }
        *out = sum / s as f64;
    }
    let _ = (n, c);
    y
}

pub fn gap_backward(gout: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut gx = vec![0.0; n * c * s];
    for nc in 0..n * c {
        let g = gout[nc] / s as f64;
        for v in &mut gx[nc * s..(nc + 1) * s] {
            *v = g;
        }
    }
    gx
}

/// Fully connected layer `y = x w^T + b` with `x: [n, f]`, `w: [o, f]`,
/// `b: [o]`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, f: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = 0.0;
            for l in 0..f {
                acc += x[i * f + l] * w[j * f + l];
            }
            y[i * o + j] = acc + b[j];
        }
    }
    y
}

/// Returns `(gx, gw, gb)`.
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    n: usize,
    f: usize,
    o: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * f];
    let mut gw = vec![0.0; o * f];
    let mut gb = vec![0.0; o];
    for i in 0..n {
        for j in 0..o {
            let g = gout[i * o + j];
            gb[j] += g;
            for l in 0..f {
                gx[i * f + l] += g * w[j * f + l];
                gw[j * f + l] += g * x[i * f + l];
            }
        }
    }
    (gx, gw, gb)
}

/// Mean squared error over all elements.
pub fn mse_forward(pred: &[f64], target: &[f64]) -> f64 {
    let m = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / m
}

/// Returns `(gpred, gtarget)` scaled by the upstream scalar gradient.
pub fn mse_backward(pred: &[f64], target: &[f64], gloss: f64) -> (Vec<f64>, Vec<f64>) {
    let m = pred.len() as f64;
    let gp: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| gloss * 2.0 * (p - t) / m)
        .collect();
    let gt: Vec<f64> = gp.iter().map(|&g| -g).collect();
    (gp, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_zeroes_negatives_and_zero_subgradient() {
        let x = [-1.5, 0.0, 2.0];
        assert_eq!(relu_forward(&x), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&x, &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn bn_eval_before_any_batch_is_an_error() {
        let running = RunningStats::new(1);
        let err = bn_forward_eval(&[1.0, 2.0], 2, 1, 1, &[1.0], &[0.0], 1e-5, &running)
            .unwrap_err();
        assert!(err.to_string().contains("running statistics"));
    }

    #[test]
    fn bn_train_normalizes_and_updates_running_stats() {
        let mut running = RunningStats::new(1);
        let x = [1.0, 2.0, 3.0, 4.0];
        let (y, _, _) =
            bn_forward_train(&x, 4, 1, 1, &[1.0], &[0.0], 1e-5, 0.1, &mut running).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert!((running.mean[0] - 0.1 * 2.5).abs() < 1e-12);
        let unbiased = x.iter().map(|v| (v - 2.5) * (v - 2.5)).sum::<f64>() / 3.0;
        assert!((running.var[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        assert_eq!(running.count, 1);
    }

    #[test]
    fn gap_averages_each_channel() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(gap_forward(&x, 1, 2, 3), vec![2.0, 5.0]);
        assert_eq!(gap_backward(&[3.0, 6.0], 1, 2, 3), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_matches_hand_computation() {
        // x = [[1, 2]], w = [[3, 4]], b = [5] => y = 1*3 + 2*4 + 5 = 16
        let y = linear_forward(&[1.0, 2.0], &[3.0, 4.0], &[5.0], 1, 2, 1);
        assert_eq!(y, vec![16.0]);
        let (gx, gw, gb) = linear_backward(&[1.0, 2.0], &[3.0, 4.0], &[1.0], 1, 2, 1);
        assert_eq!(gx, vec![3.0, 4.0]);
        assert_eq!(gw, vec![1.0, 2.0]);
        assert_eq!(gb, vec![1.0]);
    }

    #[test]
    fn mse_of_unit_offsets_is_one() {
        assert_eq!(mse_forward(&[1.0, 2.0], &[0.0, 3.0]), 1.0);
        let (gp, gt) = mse_backward(&[1.0, 2.0], &[0.0, 3.0], 1.0);
        assert_eq!(gp, vec![1.0, -1.0]);
        assert_eq!(gt, vec![-1.0, 1.0]);
    }
}
