//! Central finite-difference gradient checking in f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use retrigo::tensor::Tensor;

pub const FD_TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero (for kinked ops like relu).
pub fn rand_tensor_away_from_zero(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    min_abs: f64,
    max_abs: f64,
) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.gen_range(min_abs..max_abs);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Compare analytic gradients against central differences.
///
/// `eval` maps the inputs to (scalar loss, gradient per input tensor). Up to
/// `samples_per_tensor` randomly chosen elements of every input are
/// perturbed. Returns the worst relative error seen.
pub fn check_fd<F>(
    inputs: &[Tensor<f64>],
    eval: F,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> f64
where
    F: Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>),
{
    let (_, grads) = eval(inputs);
    assert_eq!(grads.len(), inputs.len(), "one gradient per input");
    let mut worst = 0f64;
    for (ti, t) in inputs.iter().enumerate() {
        assert_eq!(grads[ti].shape(), t.shape(), "gradient shape mismatch");
        let n = t.len();
        let picks: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for ei in picks {
            let x0 = t.data()[ei];
            let eps = 1e-6 * x0.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] = x0 + eps;
            let (lp, _) = eval(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] = x0 - eps;
            let (lm, _) = eval(&minus);
            let fd = (lp - lm) / (2.0 * eps);
            let g = grads[ti].data()[ei];
            // relative criterion with an absolute floor: central differences
            // on O(1) losses cannot resolve gradients below ~1e-8
            let denom = g.abs().max(fd.abs());
            let err = ((g - fd).abs() - 1e-8).max(0.0) / denom.max(1e-7);
            assert!(
                err <= FD_TOL,
                "input {ti} element {ei}: analytic {g} vs central difference {fd} (err {err:.3e})"
            );
            worst = worst.max(err);
        }
    }
    worst
}
