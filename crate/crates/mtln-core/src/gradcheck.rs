//! Numerical gradient checking via central finite differences.
//!
//! These helpers evaluate a scalar function repeatedly with perturbed
//! inputs; they never touch the tape's backward pass, so they serve as an
//! independent oracle for it.

use alloc::vec::Vec;

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
///
/// The denominator uses the actually-realised `f32` perturbation
/// `hi - lo`, not `2 * eps`, which removes the rounding error of adding
/// `eps` to a large coordinate.
pub fn central_diff<F: FnMut(&[f32]) -> f32>(at: &[f32], eps: f32, mut f: F) -> Vec<f64> {
    let mut grad = Vec::with_capacity(at.len());
    let mut probe = at.to_vec();
    for i in 0..at.len() {
        let hi = at[i] + eps;
        let lo = at[i] - eps;
        probe[i] = hi;
        let fp = f(&probe) as f64;
        probe[i] = lo;
        let fm = f(&probe) as f64;
        probe[i] = at[i];
        grad.push((fp - fm) / (hi as f64 - lo as f64));
    }
    grad
}

/// Largest relative error between an analytic gradient and a numeric one.
///
/// Per element: `|a - n| / max(|a|, |n|, floor)`. The floor keeps noise in
/// near-zero gradients from blowing up the ratio.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a as f64;
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
