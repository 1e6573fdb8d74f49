//! Mixed Normal/neural score model for the latent prior.
//!
//! `eps_theta(z, t) = (sigma_t / ring_var_t) (1 - alpha) ⊙ z + alpha ⊙ eps'(z, t)`
//! with one learnable `alpha = logistic(logit)` per latent channel. At
//! `alpha = 0` this is exactly the noise prediction that is optimal for
//! standard-Normal data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Cache, DenseNet, Grads, NetSpec, Parameterized, Tensor};
use crate::real::Real;
use crate::schedule::SdeSchedule;

/// Initial mixing coefficient.
pub const ALPHA_INIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreNetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl Default for ScoreNetSpec {
    fn default() -> Self {
        ScoreNetSpec {
            hidden: vec![256, 256, 256],
            activation: Activation::Swish,
            time_embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedScoreNet<F = f32> {
    alpha_logits: Vec<F>,
    eps_net: DenseNet<F>,
    latent_dim: usize,
}

/// Intermediate values of one evaluation, needed for the reverse pass.
pub struct MixedCache<F> {
    /// `sigma_t / ring_var_t` per row.
    normal_coeff: Vec<f64>,
    z: Tensor<F>,
    neural: Option<(Tensor<F>, Cache<F>)>,
}

#[inline]
fn logistic(x: f64) -> f64 {
    crate::special::sigmoid(x)
}

/// Per-row kernel coefficients, validating each `t`.
fn normal_coeffs(schedule: &SdeSchedule, t: &[f64], rows: usize) -> Result<Vec<f64>> {
    if t.len() != rows && t.len() != 1 {
        return Err(Error::shape(format!("{rows} times"), t.len()));
    }
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let ti = if t.len() == 1 { t[0] } else { t[i] };
        let k = schedule.kernel(ti)?;
        out.push(k.std() / k.ring_var);
    }
    Ok(out)
}

impl<F: Real> MixedScoreNet<F> {
    /// Score net with `alpha = ALPHA_INIT` and a zero-initialized output layer.
    pub fn init<R: Rng + ?Sized>(latent_dim: usize, spec: &ScoreNetSpec, rng: &mut R) -> Result<Self> {
        let net_spec = NetSpec {
            input_dim: latent_dim,
            hidden: spec.hidden.clone(),
            output_dim: latent_dim,
            activation: spec.activation,
            time_embed_dim: spec.time_embed_dim,
            zero_last: true,
        };
        let logit = (ALPHA_INIT / (1.0 - ALPHA_INIT)).ln();
        Ok(MixedScoreNet {
            alpha_logits: vec![F::of(logit); latent_dim],
            eps_net: DenseNet::init(&net_spec, rng)?,
            latent_dim,
        })
    }

    pub fn from_parts(alpha_logits: Vec<F>, eps_net: DenseNet<F>) -> Result<Self> {
        let d = alpha_logits.len();
        if eps_net.input_dim() != d || eps_net.output_dim() != d {
            return Err(Error::shape(d, format!("{}->{}", eps_net.input_dim(), eps_net.output_dim())));
        }
        Ok(MixedScoreNet {
            alpha_logits,
            eps_net,
            latent_dim: d,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn eps_net(&self) -> &DenseNet<F> {
        &self.eps_net
    }

    pub fn eps_net_mut(&mut self) -> &mut DenseNet<F> {
        &mut self.eps_net
    }

    pub fn alpha_logits(&self) -> &[F] {
        &self.alpha_logits
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.alpha_logits.iter().map(|l| logistic(l.f64())).collect()
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha().into_iter().fold(0.0, f64::max)
    }

    /// Pins every `alpha` to `value` (0 and 1 are represented exactly by
    /// infinite logits).
    pub fn set_alpha(&mut self, value: f64) {
        let logit = if value <= 0.0 {
            f64::NEG_INFINITY
        } else if value >= 1.0 {
            f64::INFINITY
        } else {
            (value / (1.0 - value)).ln()
        };
        self.alpha_logits.fill(F::of(logit));
    }

    pub fn set_alpha_logits(&mut self, logits: &[F]) -> Result<()> {
        if logits.len() != self.latent_dim {
            return Err(Error::shape(self.latent_dim, logits.len()));
        }
        self.alpha_logits.copy_from_slice(logits);
        Ok(())
    }

    fn neural_needed(&self) -> bool {
        self.alpha_logits.iter().any(|l| logistic(l.f64()) != 0.0)
    }

    fn check_z(&self, z: &Tensor<F>) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.latent_dim {
            return Err(Error::shape(format!("[_, {}]", self.latent_dim), format!("{:?}", z.shape())));
        }
        Ok(())
    }

    fn combine(&self, coeffs: &[f64], z: &Tensor<F>, neural: Option<&Tensor<F>>) -> Tensor<F> {
        let alpha = self.alpha();
        let d = self.latent_dim;
        let mut out = vec![F::zero(); z.len()];
        for i in 0..z.rows() {
            let zr = z.row(i);
            for j in 0..d {
                let mut v = F::of(coeffs[i] * (1.0 - alpha[j])) * zr[j];
                if let Some(n) = neural {
                    v += F::of(alpha[j]) * n.row(i)[j];
                }
                out[i * d + j] = v;
            }
        }
        Tensor::matrix(z.rows(), d, out).expect("shape preserved")
    }

    /// Noise prediction for a batch `z` at per-row times `t` (or one shared time).
    pub fn eps_theta(&self, schedule: &SdeSchedule, z: &Tensor<F>, t: &[f64]) -> Result<Tensor<F>> {
        self.check_z(z)?;
        let coeffs = normal_coeffs(schedule, t, z.rows())?;
        let neural = if self.neural_needed() {
            Some(self.eps_net.forward(z, Some(t))?)
        } else {
            None
        };
        Ok(self.combine(&coeffs, z, neural.as_ref()))
    }

    pub fn eps_theta_cached(
        &self,
        schedule: &SdeSchedule,
        z: &Tensor<F>,
        t: &[f64],
    ) -> Result<(Tensor<F>, MixedCache<F>)> {
        self.check_z(z)?;
        let coeffs = normal_coeffs(schedule, t, z.rows())?;
        let neural = if self.neural_needed() {
            Some(self.eps_net.forward_cached(z, Some(t))?)
        } else {
            None
        };
        let eps = self.combine(&coeffs, z, neural.as_ref().map(|n| &n.0));
        Ok((
            eps,
            MixedCache {
                normal_coeff: coeffs,
                z: z.clone(),
                neural,
            },
        ))
    }

    /// Score `-eps_theta / sigma_t`.
    pub fn score(&self, schedule: &SdeSchedule, z: &Tensor<F>, t: &[f64]) -> Result<Tensor<F>> {
        let mut eps = self.eps_theta(schedule, z, t)?;
        let rows = z.rows();
        for i in 0..rows {
            let ti = if t.len() == 1 { t[0] } else { t[i] };
            let sigma = schedule.kernel(ti)?.std();
            if sigma <= 0.0 {
                return Err(Error::Domain(format!("score undefined at t={ti}: sigma_t = 0")));
            }
            let inv = F::of(-1.0 / sigma);
            for v in eps.row_mut(i) {
                *v *= inv;
            }
        }
        Ok(eps)
    }

    /// Reverse pass for `<upstream, eps_theta>`: gradients over
    /// `[alpha_logits, eps_net...]` and with respect to `z`.
    pub fn grad_eps_theta(&self, cache: &MixedCache<F>, upstream: &Tensor<F>) -> Result<(Grads<F>, Tensor<F>)> {
        let z = &cache.z;
        if upstream.shape() != z.shape() {
            return Err(Error::shape(format!("{:?}", z.shape()), format!("{:?}", upstream.shape())));
        }
        let d = self.latent_dim;
        let alpha = self.alpha();
        let mut d_logit = vec![0.0f64; d];
        let mut dz = vec![F::zero(); z.len()];
        let mut neural_up = vec![F::zero(); z.len()];
        for i in 0..z.rows() {
            let (u, zr) = (upstream.row(i), z.row(i));
            let c = cache.normal_coeff[i];
            for j in 0..d {
                let uj = u[j].f64();
                let neural = cache.neural.as_ref().map_or(0.0, |n| n.0.row(i)[j].f64());
                d_logit[j] += uj * (neural - c * zr[j].f64());
                dz[i * d + j] = F::of(c * (1.0 - alpha[j]) * uj);
                neural_up[i * d + j] = F::of(alpha[j] * uj);
            }
        }
        let logit_grad: Vec<F> = d_logit
            .iter()
            .zip(&alpha)
            .map(|(&g, &a)| F::of(g * a * (1.0 - a)))
            .collect();
        let mut grads = Grads {
            bufs: vec![logit_grad],
        };
        match &cache.neural {
            Some((_, ncache)) => {
                let up = Tensor::matrix(z.rows(), d, neural_up)?;
                let (g, dzn) = self.eps_net.backward(ncache, &up)?;
                for (a, &b) in dz.iter_mut().zip(dzn.data()) {
                    *a += b;
                }
                grads.bufs.extend(g.bufs);
            }
            None => {
                grads
                    .bufs
                    .extend(self.eps_net.param_slices().iter().map(|p| vec![F::zero(); p.len()]));
            }
        }
        Ok((grads, Tensor::matrix(z.rows(), d, dz)?))
    }

    /// Per-row `v^T (d eps_theta / dz) v`; the Normal branch contributes its
    /// exact diagonal, only the neural branch is probed.
    pub fn eps_jacobian_probe(
        &self,
        schedule: &SdeSchedule,
        z: &Tensor<F>,
        t: &[f64],
        probe: &Tensor<F>,
    ) -> Result<(Tensor<F>, Vec<f64>)> {
        let (eps, cache) = self.eps_theta_cached(schedule, z, t)?;
        let alpha = self.alpha();
        let d = self.latent_dim;
        let mut quad: Vec<f64> = (0..z.rows())
            .map(|i| {
                let c = cache.normal_coeff[i];
                let p = probe.row(i);
                (0..d).map(|j| c * (1.0 - alpha[j]) * p[j].f64() * p[j].f64()).sum()
            })
            .collect();
        if let Some((_, ncache)) = &cache.neural {
            let weighted = Tensor::matrix(
                z.rows(),
                d,
                probe
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| F::of(alpha[k % d]) * v)
                    .collect(),
            )?;
            let jt = self.eps_net.backward_input(ncache, &weighted)?;
            for (i, q) in quad.iter_mut().enumerate() {
                *q += probe.row(i).iter().zip(jt.row(i)).map(|(a, b)| a.f64() * b.f64()).sum::<f64>();
            }
        }
        Ok((eps, quad))
    }

    /// Per-row exact `tr(d eps_theta / dz)` via `D` reverse passes.
    pub fn eps_jacobian_trace_exact(
        &self,
        schedule: &SdeSchedule,
        z: &Tensor<F>,
        t: &[f64],
    ) -> Result<(Tensor<F>, Vec<f64>)> {
        let (eps, cache) = self.eps_theta_cached(schedule, z, t)?;
        let alpha = self.alpha();
        let d = self.latent_dim;
        let sum_1m_alpha: f64 = alpha.iter().map(|a| 1.0 - a).sum();
        let mut tr: Vec<f64> = cache.normal_coeff.iter().map(|c| c * sum_1m_alpha).collect();
        if let Some((_, ncache)) = &cache.neural {
            for j in 0..d {
                let mut e = vec![F::zero(); z.len()];
                for i in 0..z.rows() {
                    e[i * d + j] = F::of(alpha[j]);
                }
                let jt = self.eps_net.backward_input(ncache, &Tensor::matrix(z.rows(), d, e)?)?;
                for (i, v) in tr.iter_mut().enumerate() {
                    *v += jt.row(i)[j].f64();
                }
            }
        }
        Ok((eps, tr))
    }

    pub fn cast<G: Real>(&self) -> MixedScoreNet<G> {
        MixedScoreNet {
            alpha_logits: self.alpha_logits.iter().map(|&x| G::of(x.f64())).collect(),
            eps_net: self.eps_net.cast(),
            latent_dim: self.latent_dim,
        }
    }
}

impl<F: Real> Parameterized<F> for MixedScoreNet<F> {
    fn param_slices(&self) -> Vec<&[F]> {
        let mut v: Vec<&[F]> = vec![&self.alpha_logits];
        v.extend(self.eps_net.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v: Vec<&mut [F]> = vec![&mut self.alpha_logits];
        v.extend(self.eps_net.param_slices_mut());
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec!["alpha_logits".to_string()];
        v.extend(self.eps_net.param_names().into_iter().map(|n| format!("eps_net.{n}")));
        v
    }
}

/// Max relative error of the analytic parameter and input gradients of
/// `<u, eps_theta(z, t)>` for random `z`, `u` against `f64` central
/// differences.
pub fn check_mixed_gradients<F: Real>(m: &MixedScoreNet<F>, schedule: &SdeSchedule, seed: u64) -> f64 {
    use crate::nn::gradcheck::{max_rel_error, numeric_input_grad, numeric_param_grads, randn_matrix};
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Diagnostic, 0);
    let (b, d) = (4, m.latent_dim());
    let z: Tensor<F> = randn_matrix(b, d, &mut rng);
    let u: Tensor<F> = randn_matrix(b, d, &mut rng);
    let t: Vec<f64> = (0..b).map(|_| 0.05 + 0.95 * rng.random::<f64>()).collect();
    let (_, cache) = m.eps_theta_cached(schedule, &z, &t).expect("shapes");
    let (g, dz) = m.grad_eps_theta(&cache, &u).expect("shapes");
    let m64 = m.cast::<f64>();
    let (z64, u64_) = (z.cast::<f64>(), u.cast::<f64>());
    let dot = |e: Tensor<f64>| -> f64 { e.data().iter().zip(u64_.data()).map(|(a, b)| a * b).sum() };
    let num_p = numeric_param_grads(&m64, |mm| dot(mm.eps_theta(schedule, &z64, &t).unwrap()));
    let num_z = numeric_input_grad(z64.data(), |zv| {
        dot(m64.eps_theta(schedule, &Tensor::matrix(b, d, zv.to_vec()).unwrap(), &t).unwrap())
    });
    let ez: Vec<f64> = dz.data().iter().map(|v| v.f64()).collect();
    max_rel_error(&g.flatten(), &num_p).max(max_rel_error(&ez, &num_z))
}
