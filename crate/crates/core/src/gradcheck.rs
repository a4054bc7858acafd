//! Central finite-difference gradient checking.

/// Central difference gradient of `f` at `x` with step `h` per coordinate.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for c in 0..x.len() {
        let orig = buf[c];
        buf[c] = orig + h;
        let hi = f(&buf);
        buf[c] = orig - h;
        let lo = f(&buf);
        buf[c] = orig;
        g.push((hi - lo) / (2.0 * h));
    }
    g
}

/// Worst coordinate mismatch between `analytic` and `numeric`:
/// relative error, falling back to absolute error below `abs_floor`.
pub fn max_mismatch(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            if scale < abs_floor {
                diff
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}
