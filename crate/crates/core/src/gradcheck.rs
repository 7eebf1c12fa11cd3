//! Central finite-difference gradient checking.
//!
//! The checker only evaluates a scalar-valued closure at perturbed inputs; it
//! never touches the tape's adjoint path, so it serves as an independent
//! reference for analytic gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every element of
/// `params`, step `h` per element.
pub fn finite_difference_grads(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    h: f64,
) -> Vec<Tensor<f64>> {
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::<f64>::zeros(params[pi].shape());
        for ei in 0..params[pi].numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += h;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let fm = f(&minus);
            g.data_mut()[ei] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative disagreement between analytic and finite-difference
/// gradients, with an absolute floor so near-zero entries compare sanely.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert_eq!(a.shape(), n.shape(), "gradient shapes must match");
        for (&av, &nv) in a.data().iter().zip(n.data().iter()) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}
