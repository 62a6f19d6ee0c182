//! Shared helpers for in-crate tests.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub fn rand_array(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>() * 2.0 - 1.0)
}

/// Central-difference comparison at step 1e-5. Relative error uses the
/// symmetric denominator |a| + |n|; pairs with both magnitudes below 1e-6
/// count as exact.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    tol: f64,
) -> f64 {
    let h = 1e-5;
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + h;
        let fp = f(&x);
        x[i] = keep - h;
        let fm = f(&x);
        x[i] = keep;
        let num = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs() + num.abs();
        let rel = if denom < 1e-6 { 0.0 } else { (a - num).abs() / denom };
        worst = worst.max(rel);
        assert!(rel < tol, "coord {i}: analytic {a}, numeric {num}, rel {rel}");
    }
    worst
}
