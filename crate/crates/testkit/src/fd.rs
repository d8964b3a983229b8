//! Central finite differences and error metrics.

/// Central-difference gradient of a scalar function at `x`.
///
/// Perturbs one coordinate at a time: (f(x+h) - f(x-h)) / 2h.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor on the denominator so near-zero pairs are
/// compared absolutely at the floor scale.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max elementwise relative error between an f32 result and its f64 oracle.
pub fn max_rel_err(got: &[f32], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch in max_rel_err");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| rel_err(g as f64, w, floor))
        .fold(0.0, f64::max)
}

/// Max elementwise absolute error between an f32 result and its f64 oracle.
pub fn max_abs_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch in max_abs_err");
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}
