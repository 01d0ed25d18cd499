//! Finite-difference helpers for validating analytic gradients.

/// Central-difference step size.
pub const STEP: f64 = 1e-5;

/// Values below this are treated as numerically zero when comparing.
const FLOOR: f64 = 1e-7;

/// Relative error between an analytic and a numeric derivative. Pairs where
/// both magnitudes sit under the floor compare as equal, since the central
/// difference has no usable precision there.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < FLOOR && numeric.abs() < FLOOR {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

/// Largest pairwise relative error across two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to every entry of `data`.
/// `data` is restored to its original contents before returning.
pub fn central_diff<F>(data: &mut [f64], mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = vec![0.0; data.len()];
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + STEP;
        let plus = f(data);
        data[i] = orig - STEP;
        let minus = f(data);
        data[i] = orig;
        out[i] = (plus - minus) / (2.0 * STEP);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_quadratic_derivative() {
        let mut data = vec![3.0, -2.0];
        let grad = central_diff(&mut data, |d| d[0] * d[0] + 2.0 * d[1] * d[1]);
        assert!((grad[0] - 6.0).abs() < 1e-6);
        assert!((grad[1] + 8.0).abs() < 1e-6);
        assert_eq!(data, vec![3.0, -2.0]);
    }

    #[test]
    fn rel_err_ignores_joint_underflow() {
        assert_eq!(rel_err(1e-9, -1e-9), 0.0);
        assert!(rel_err(1.0, 1.1) > 0.09);
    }
}
