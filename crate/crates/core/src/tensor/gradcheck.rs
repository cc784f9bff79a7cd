//! Central finite-difference gradients.
//!
//! Deliberately independent of the tape: it only needs a closure from a flat
//! parameter vector to a scalar, so it can serve as an oracle for any loss
//! in the crate.

/// Central differences with step `h` around `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Max over entries of |a-b| / max(|a|, |b|, 1e-5). The floor keeps
/// finite-difference roundoff on near-zero gradients from registering as a
/// large relative error.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-5))
        .fold(0.0, f64::max)
}
