//! Central finite-difference oracle for verifying analytic gradients.
//!
//! Deliberately knows nothing about the tape: it only evaluates a scalar
//! function at perturbed points, so it stays independent of the backward
//! rules it is used to check.

/// Numerical gradient of `f` at `x` via central differences with step `h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let fp = f(&point);
        point[i] = orig - h;
        let fm = f(&point);
        point[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest relative error between two gradient vectors.
///
/// The denominator is floored so that pairs of near-zero entries compare as
/// equal instead of amplifying finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x, y) = x^2 + 3y -> df = [2x, 3]
        let g = central_diff(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floor_handles_zero_pairs() {
        assert_eq!(max_rel_err(&[0.0], &[0.0], 1e-6), 0.0);
        assert!(max_rel_err(&[1.0], &[1.001], 1e-6) < 2e-3);
    }
}
