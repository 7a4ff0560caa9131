//! Numerical differentiation helpers used by the gradient test suites.

/// Central-difference gradient of a scalar function, with the step scaled per
/// coordinate as `h * (1 + |x_i|)`.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * (1.0 + x[i].abs());
            let orig = probe[i];
            probe[i] = orig + step;
            let fp = f(&probe);
            probe[i] = orig - step;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error, with the denominator floored at 1 so
/// near-zero entries are compared absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_quadratic_gradient() {
        // f(x) = sum(x^2) => grad = 2x
        let x = [1.0, -2.0, 0.5];
        let fd = central_diff(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        let exact: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(max_rel_err(&fd, &exact) < 1e-9);
    }

    #[test]
    fn rel_err_floors_denominator_at_one() {
        assert_eq!(max_rel_err(&[1e-9], &[0.0]), 1e-9);
        assert_eq!(max_rel_err(&[200.0], &[100.0]), 0.5);
    }
}
