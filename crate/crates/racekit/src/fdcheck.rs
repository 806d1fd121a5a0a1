//! Finite-difference oracles for gradient verification.
//!
//! These helpers only re-evaluate forward closures; they share no code with
//! the tape's backward rules, so agreement between the two is meaningful
//! evidence. Central differences with step `h` carry O(h^2) truncation error
//! plus roundoff of order `eps * |f| / h`; with `h = 1e-5` and losses of
//! order one that keeps the checks comfortably inside a 1e-4 relative
//! tolerance.

/// Central-difference gradient of `f` at `x`, all coordinates.
pub fn grad_fd<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut buf = x.to_vec();
    for k in 0..x.len() {
        let orig = buf[k];
        buf[k] = orig + h;
        let hi = f(&buf);
        buf[k] = orig - h;
        let lo = f(&buf);
        buf[k] = orig;
        g[k] = (hi - lo) / (2.0 * h);
    }
    g
}

/// Central-difference derivative along one coordinate.
pub fn partial_fd<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], k: usize, h: f64) -> f64 {
    let mut buf = x.to_vec();
    buf[k] = x[k] + h;
    let hi = f(&buf);
    buf[k] = x[k] - h;
    let lo = f(&buf);
    (hi - lo) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero pairs compare sanely:
/// |a - b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Asserts `|a - b| <= atol + rtol * |b|`, mirroring the comparison style of
/// numeric test suites. Panics with both values and the bound on failure.
pub fn assert_close(a: f64, b: f64, rtol: f64, atol: f64) {
    let bound = atol + rtol * b.abs();
    assert!(
        (a - b).abs() <= bound,
        "values differ: {a} vs {b} (|diff| = {}, bound = {bound})",
        (a - b).abs()
    );
}
