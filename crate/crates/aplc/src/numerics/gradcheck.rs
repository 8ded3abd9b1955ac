//! Central-difference gradient estimation for verifying analytic backward
//! passes. Everything here runs in f64; callers lift their f32 parameters
//! before checking.

/// Estimate df/dx at `x` by central differences with half-width `eps`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let f_plus = f(&probe);
        probe[i] = orig - eps;
        let f_minus = f(&probe);
        probe[i] = orig;
        grad[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between two gradient vectors, with the denominator
/// floored at 1 so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
