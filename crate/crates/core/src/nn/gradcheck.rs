//! Central-difference gradient checks.
//!
//! The numeric oracle always runs in `f64` (the model is cast up before
//! perturbation), so a 32-bit analytic gradient is compared against a
//! reference that is not itself limited by 32-bit cancellation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DenseNet, Parameterized, Tensor};
use crate::real::Real;
use crate::rng::{stream, Purpose};

/// Relative step used for central differences.
pub const FD_STEP: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest element-wise relative error. The floor is `1e-3` of the largest
/// reference magnitude, so entries that are numerically zero compared with
/// the rest of the gradient are judged on an absolute scale.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_error(a, b, floor))
        .fold(0.0, f64::max)
}

/// Central differences at steps `h` and `h/2` combined by Richardson
/// extrapolation, which cancels the `O(h^2)` truncation term.
fn richardson(f: impl Fn(f64) -> f64, x0: f64) -> f64 {
    let h = FD_STEP * x0.abs().max(1.0);
    let d1 = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
    let d2 = (f(x0 + 0.5 * h) - f(x0 - 0.5 * h)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Numeric gradient of `loss` over all parameters of `model`, with base
/// step `FD_STEP * max(1, |p|)`.
pub fn numeric_param_grads<M: Parameterized<f64> + Clone>(model: &M, loss: impl Fn(&M) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    let sizes: Vec<usize> = m.param_slices().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let p0 = m.param_slices()[k][i];
            let m_cell = std::cell::RefCell::new(&mut m);
            let d = richardson(
                |p| {
                    let mut mm = m_cell.borrow_mut();
                    mm.param_slices_mut()[k][i] = p;
                    loss(&mm)
                },
                p0,
            );
            m.param_slices_mut()[k][i] = p0;
            out.push(d);
        }
    }
    out
}

/// Numeric gradient of `f` with respect to the vector `x`.
pub fn numeric_input_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            richardson(
                |v| {
                    let mut xv = x.to_vec();
                    xv[i] = v;
                    f(&xv)
                },
                x[i],
            )
        })
        .collect()
}

pub fn randn_matrix<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    let d = (0..rows * cols)
        .map(|_| F::of(StandardNormal.sample(rng)))
        .collect();
    Tensor::matrix(rows, cols, d).expect("sizes agree")
}

/// Max relative error of the analytic parameter and input gradients of
/// `<u, net(x, t)>` for random `x`, `t`, `u` against `f64` central differences.
pub fn check_net_gradients<F: Real>(net: &DenseNet<F>, seed: u64) -> f64 {
    let mut rng = stream(seed, Purpose::Diagnostic, 0);
    let batch = 3;
    let x: Tensor<F> = randn_matrix(batch, net.input_dim(), &mut rng);
    let u: Tensor<F> = randn_matrix(batch, net.output_dim(), &mut rng);
    let ts: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    let t = (net.time_embed_dim() > 0).then_some(&ts[..]);

    let (_, cache) = net.forward_cached(&x, t).expect("shapes");
    let (g, dx) = net.backward(&cache, &u).expect("shapes");

    let net64 = net.cast::<f64>();
    let x64 = x.cast::<f64>();
    let u64_ = u.cast::<f64>();
    let dot = |y: &Tensor<f64>| -> f64 { y.data().iter().zip(u64_.data()).map(|(a, b)| a * b).sum() };
    let num_p = numeric_param_grads(&net64, |n| dot(&n.forward(&x64, t).unwrap()));
    let num_x = numeric_input_grad(x64.data(), |xv| {
        let xt = Tensor::matrix(batch, net.input_dim(), xv.to_vec()).unwrap();
        dot(&net64.forward(&xt, t).unwrap())
    });
    let ana_x: Vec<f64> = dx.data().iter().map(|v| v.f64()).collect();
    max_rel_error(&g.flatten(), &num_p).max(max_rel_error(&ana_x, &num_x))
}
