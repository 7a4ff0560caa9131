//! Dense least-squares solvers for the fusion and bias-correction fits.
//!
//! Systems here are tiny (tens of rows, at most a few dozen columns), so a
//! plain Householder QR without pivoting is enough. Rank deficiency is
//! detected from the triangular factor and reported by column index.

use crate::error::{Error, Result};

/// Relative threshold on |R[j,j]| below which column j is declared linearly
/// dependent on its predecessors.
const RANK_TOL: f64 = 1e-10;

/// Solves `min ||A x - b||` for row-major `a` of size `rows x cols` via
/// Householder QR. Requires `rows >= cols`; fails if the design matrix is
/// rank-deficient, naming the first collinear column.
pub fn lstsq(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(Error::config(format!(
            "lstsq size mismatch: matrix {}, expected {rows}x{cols}, rhs {}",
            a.len(),
            b.len()
        )));
    }
    if rows < cols {
        return Err(Error::config(format!(
            "lstsq needs at least as many rows as columns, got {rows}x{cols}"
        )));
    }
    let mut r = a.to_vec();
    let mut qtb = b.to_vec();
    let max_colnorm = (0..cols)
        .map(|j| (0..rows).map(|i| r[i * cols + j] * r[i * cols + j]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let scale = max_colnorm.max(f64::MIN_POSITIVE);

    for j in 0..cols {
        let tail: Vec<f64> = (j..rows).map(|i| r[i * cols + j]).collect();
        let norm = tail.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= RANK_TOL * scale {
            return Err(Error::numeric(format!(
                "rank-deficient design matrix: column {j} is collinear with earlier columns"
            )));
        }
        let alpha = if tail[0] >= 0.0 { -norm } else { norm };
        let mut v = tail;
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        // Reflect the remaining columns and the right-hand side.
        for k in j..cols {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(off, &vi)| vi * r[(j + off) * cols + k])
                .sum();
            let s = 2.0 * dot / vtv;
            for (off, &vi) in v.iter().enumerate() {
                r[(j + off) * cols + k] -= s * vi;
            }
        }
        let dot: f64 = v.iter().enumerate().map(|(off, &vi)| vi * qtb[j + off]).sum();
        let s = 2.0 * dot / vtv;
        for (off, &vi) in v.iter().enumerate() {
            qtb[j + off] -= s * vi;
        }
        r[j * cols + j] = alpha;
        for i in j + 1..rows {
            r[i * cols + j] = 0.0;
        }
    }

    let mut x = vec![0.0; cols];
    for j in (0..cols).rev() {
        let mut acc = qtb[j];
        for k in j + 1..cols {
            acc -= r[j * cols + k] * x[k];
        }
        let diag = r[j * cols + j];
        if diag.abs() <= RANK_TOL * scale {
            return Err(Error::numeric(format!(
                "rank-deficient design matrix: column {j} is collinear with earlier columns"
            )));
        }
        x[j] = acc / diag;
    }
    Ok(x)
}

/// Ridge-regularized least squares, solved as the augmented system
/// `[A; sqrt(lambda) I] x = [b; 0]` so it reuses the QR path. Any
/// `lambda > 0` makes the system full rank.
pub fn lstsq_ridge(a: &[f64], rows: usize, cols: usize, b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(Error::config(format!(
            "ridge parameter must be positive, got {lambda}"
        )));
    }
    let mut aug = vec![0.0; (rows + cols) * cols];
    aug[..rows * cols].copy_from_slice(&a[..rows * cols]);
    let sq = lambda.sqrt();
    for j in 0..cols {
        aug[(rows + j) * cols + j] = sq;
    }
    let mut rhs = b.to_vec();
    rhs.resize(rows + cols, 0.0);
    lstsq(&aug, rows + cols, cols, &rhs)
}

/// Fits `y = slope * x + intercept` by simple least squares. Fails when the
/// predictor has zero variance.
pub fn simple_linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::config(format!(
            "simple linear fit needs matching non-empty inputs, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::numeric(
            "cannot fit a line: predictor has zero variance",
        ));
    }
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}
