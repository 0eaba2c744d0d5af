/// Central-difference gradient `(f(θ+heᵢ) − f(θ−heᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = f(&point);
        point[i] = theta[i] - h;
        let minus = f(&point);
        point[i] = theta[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true derivative is (near) zero from
/// turning round-off into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
