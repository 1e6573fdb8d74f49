//! Cross-entropy between the encoder's aggregate posterior and the
//! score-based prior, expressed as a weighted denoising loss, plus the
//! Gaussian fixed-point analytics used by the variance diagnostic.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Cache, Grads, Tensor};
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::schedule::SdeSchedule;
use crate::score_prior::{MixedCache, MixedScoreNet, ScoreNetSpec};
use crate::time_sampling::{TDraw, TSamplingStrategy, TimeSampler, WeightingMechanism};
use crate::vae::{reparam_sample, Posterior, VaeBackbone};

/// `D/2 log(2 pi e sigma_eps^2)`: the constant completing the
/// cross-entropy, with `sigma_eps^2 = var(t_cutoff)`.
pub fn ce_const(schedule: &SdeSchedule, latent_dim: usize) -> f64 {
    0.5 * latent_dim as f64 * (2.0 * PI * E * schedule.sigma2_eps()).ln()
}

/// Per-datapoint loss terms in nats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub neg_entropy: f64,
    /// Includes `ce_const`.
    pub cross_entropy: f64,
    pub nelbo: f64,
    pub ce_const: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, neg_entropy: f64, cross_entropy: f64, ce_const: f64) -> Self {
        LossBreakdown {
            recon,
            neg_entropy,
            cross_entropy,
            nelbo: recon + neg_entropy + cross_entropy,
            ce_const,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.neg_entropy, self.cross_entropy, self.nelbo].iter().all(|v| v.is_finite())
    }
}

/// One denoising evaluation `||eps - eps_theta(m z0 + sigma eps, t)||^2`
/// on a batch, with everything needed for the reverse pass.
pub struct DsmPass<F: Real> {
    pub draws: Vec<TDraw>,
    pub eps: Tensor<F>,
    pub eps_theta: Tensor<F>,
    /// `m(t)` per row.
    pub mean_coeff: Vec<f64>,
    /// Squared residual per row.
    pub loss: Vec<f64>,
    cache: MixedCache<F>,
}

impl<F: Real> DsmPass<F> {
    /// Diffuses `z0`, evaluates the prior once and records per-row losses.
    pub fn run<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        prior: &MixedScoreNet<F>,
        sampler: &TimeSampler,
        z0: &Tensor<F>,
        time_rng: &mut R1,
        noise_rng: &mut R2,
    ) -> Result<Self> {
        let schedule = sampler.schedule();
        let (b, d) = (z0.rows(), z0.cols());
        let draws: Vec<TDraw> = (0..b).map(|_| sampler.draw(time_rng)).collect::<Result<_>>()?;
        let eps_data: Vec<F> = (0..b * d)
            .map(|_| F::of(StandardNormal.sample(noise_rng)))
            .collect();
        let eps = Tensor::matrix(b, d, eps_data)?;
        let mut zt = Vec::with_capacity(b * d);
        let mut mean_coeff = Vec::with_capacity(b);
        for i in 0..b {
            let k = schedule.kernel(draws[i].t)?;
            let (m, s) = (F::of(k.mean_coeff), F::of(k.std()));
            mean_coeff.push(k.mean_coeff);
            for (&z, &e) in z0.row(i).iter().zip(eps.row(i)) {
                zt.push(m * z + s * e);
            }
        }
        let ts: Vec<f64> = draws.iter().map(|d| d.t).collect();
        let (eps_theta, cache) = prior.eps_theta_cached(schedule, &Tensor::matrix(b, d, zt)?, &ts)?;
        let loss = (0..b)
            .map(|i| {
                eps.row(i)
                    .iter()
                    .zip(eps_theta.row(i))
                    .map(|(&a, &p)| (a.f64() - p.f64()).powi(2))
                    .sum()
            })
            .collect();
        Ok(DsmPass {
            draws,
            eps,
            eps_theta,
            mean_coeff,
            loss,
            cache,
        })
    }

    pub fn batch(&self) -> usize {
        self.draws.len()
    }

    /// Mean over the batch of `weights[i] * loss[i]`.
    pub fn weighted_mean(&self, weights: &[f64]) -> f64 {
        weights.iter().zip(&self.loss).map(|(w, l)| w * l).sum::<f64>() / self.batch() as f64
    }

    /// Per-row `combined_weight(draw, target)` under `sampler`.
    pub fn weights(&self, sampler: &TimeSampler, target: WeightingMechanism) -> Result<Vec<f64>> {
        self.draws.iter().map(|d| sampler.combined_weight(d, target)).collect()
    }

    /// Reverse pass of `mean_i weights[i] * loss[i]`: prior gradients and
    /// the gradient with respect to `z0` through `z_t = m z0 + sigma eps`.
    pub fn backward(&self, prior: &MixedScoreNet<F>, weights: &[f64]) -> Result<(Grads<F>, Tensor<F>)> {
        let (b, d) = (self.batch(), self.eps.cols());
        if weights.len() != b {
            return Err(Error::shape(b, weights.len()));
        }
        let mut up = Vec::with_capacity(b * d);
        for i in 0..b {
            let c = -2.0 * weights[i] / b as f64;
            for (&e, &p) in self.eps.row(i).iter().zip(self.eps_theta.row(i)) {
                up.push(F::of(c * (e.f64() - p.f64())));
            }
        }
        let (g, mut dz) = prior.grad_eps_theta(&self.cache, &Tensor::matrix(b, d, up)?)?;
        for i in 0..b {
            let m = F::of(self.mean_coeff[i]);
            for v in dz.row_mut(i) {
                *v *= m;
            }
        }
        Ok((g, dz))
    }
}

/// Forward state of the VAE for one batch.
pub struct VaePass<F: Real> {
    pub post: Posterior<F>,
    pub var: Tensor<F>,
    pub z0: Tensor<F>,
    /// Per-row `-log p(x | z0)`.
    pub recon: Vec<f64>,
    /// Per-row `log q(z0 | x)`.
    pub neg_entropy: Vec<f64>,
    enc_cache: Cache<F>,
    dec_cache: Cache<F>,
    d_out: Tensor<F>,
}

impl<F: Real> VaePass<F> {
    pub fn run<R: Rng + ?Sized>(vae: &VaeBackbone<F>, x: &Tensor<F>, noise_rng: &mut R) -> Result<Self> {
        let (post, enc_cache) = vae.encode_cached(x)?;
        let var = post.var();
        let (b, d) = (x.rows(), vae.latent_dim());
        let eta: Vec<F> = (0..b * d).map(|_| F::of(StandardNormal.sample(noise_rng))).collect();
        let eta = Tensor::matrix(b, d, eta)?;
        let z0 = reparam_sample(&post.mean, &var, &eta)?;
        let (out, dec_cache) = vae.decode_cached(&z0)?;
        let (recon, d_out) = vae.recon_nll_and_grad(x, &out)?;
        // With z0 = mean + sqrt(var) eta the density term is
        // -1/2 sum(log 2 pi + logvar + eta^2).
        let ln2pi = (2.0 * PI).ln();
        let neg_entropy = (0..b)
            .map(|i| {
                post.logvar
                    .row(i)
                    .iter()
                    .zip(eta.row(i))
                    .map(|(&lv, &e)| -0.5 * (ln2pi + lv.f64() + e.f64() * e.f64()))
                    .sum()
            })
            .collect();
        Ok(VaePass {
            post,
            var,
            z0,
            recon,
            neg_entropy,
            enc_cache,
            dec_cache,
            d_out,
        })
    }

    pub fn batch(&self) -> usize {
        self.z0.rows()
    }

    pub fn mean_recon(&self) -> f64 {
        self.recon.iter().sum::<f64>() / self.batch() as f64
    }

    pub fn mean_neg_entropy(&self) -> f64 {
        self.neg_entropy.iter().sum::<f64>() / self.batch() as f64
    }

    /// Per-row `KL(q(z0|x) || N(0, I))`.
    pub fn standard_kl(&self) -> Result<Vec<f64>> {
        crate::vae::standard_kl(&self.post.mean, &self.var)
    }

    /// Gradients of `mean(recon) + entropy_weight * mean(neg_entropy)
    /// + kl_weight * mean(KL)` plus any extra upstream on `z0`, over
    /// `[encoder..., decoder...]`.
    pub fn backward(
        &self,
        vae: &VaeBackbone<F>,
        dz0_extra: Option<&Tensor<F>>,
        entropy_weight: f64,
        kl_weight: f64,
    ) -> Result<Grads<F>> {
        let (b, d) = (self.batch(), vae.latent_dim());
        let inv_b = 1.0 / b as f64;
        let scaled = self.d_out.map(|g| g * F::of(inv_b));
        let (g_dec, mut dz0) = vae.decoder_backward(&self.dec_cache, &scaled)?;
        if let Some(extra) = dz0_extra {
            for (a, &e) in dz0.data_mut().iter_mut().zip(extra.data()) {
                *a += e;
            }
        }
        let mut d_mean = vec![F::zero(); b * d];
        let mut d_logvar = vec![F::zero(); b * d];
        for i in 0..b {
            let (m, v, z, g) = (
                self.post.mean.row(i),
                self.var.row(i),
                self.z0.row(i),
                dz0.row(i),
            );
            for j in 0..d {
                let k = i * d + j;
                let (mj, vj) = (m[j].f64(), v[j].f64());
                // dz0/dmean = 1, dz0/dlogvar = (z0 - mean) / 2.
                let mut gm = g[j].f64();
                let mut gl = g[j].f64() * 0.5 * (z[j].f64() - mj);
                gl += -0.5 * entropy_weight * inv_b;
                gm += kl_weight * mj * inv_b;
                gl += kl_weight * 0.5 * (vj - 1.0) * inv_b;
                d_mean[k] = F::of(gm);
                d_logvar[k] = F::of(gl);
            }
        }
        let g_enc = vae.encoder_backward(
            &self.enc_cache,
            &self.post,
            &Tensor::matrix(b, d, d_mean)?,
            &Tensor::matrix(b, d, d_logvar)?,
        )?;
        Ok(g_enc.concat(g_dec))
    }
}

/// Per-row single-sample cross-entropy estimates for latents `z0`:
/// `combined_weight(draw, Wll) * ||eps - eps_theta||^2 + ce_const`.
pub fn cross_entropy_terms<F: Real, R: Rng + ?Sized>(
    prior: &MixedScoreNet<F>,
    sampler: &TimeSampler,
    z0: &Tensor<F>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut noise = stream(rng.random(), Purpose::VaeNoise, 0);
    let pass = DsmPass::run(prior, sampler, z0, rng, &mut noise)?;
    let w = pass.weights(sampler, WeightingMechanism::Wll)?;
    let c = ce_const(sampler.schedule(), z0.cols());
    Ok(w.iter().zip(&pass.loss).map(|(w, l)| w * l + c).collect())
}

/// Batch-mean single-sample estimate of `CE(q(z0|x) || p(z0))` in nats.
pub fn cross_entropy_estimate<F: Real, R: Rng + ?Sized>(
    vae: &VaeBackbone<F>,
    prior: &MixedScoreNet<F>,
    sampler: &TimeSampler,
    x: &Tensor<F>,
    rng: &mut R,
) -> Result<f64> {
    let mut enc = stream(rng.random(), Purpose::EncoderNoise, 0);
    let pass = VaePass::run(vae, x, &mut enc)?;
    let ce = cross_entropy_terms(prior, sampler, &pass.z0, rng)?;
    Ok(ce.iter().sum::<f64>() / ce.len() as f64)
}

/// NELBO of `vae` under the standard Normal prior: Monte-Carlo
/// reconstruction over `reps` posterior draws, closed-form entropy and
/// cross entropy.
pub fn normal_prior_nelbo<F: Real>(vae: &VaeBackbone<F>, data: &Dataset, reps: usize, seed: u64) -> Result<LossBreakdown> {
    let x: Tensor<F> = data.epoch_data(0).cast();
    let ln2pi = (2.0 * PI).ln();
    let (mut recon, mut ne, mut ce) = (0.0, 0.0, 0.0);
    for r in 0..reps.max(1) as u64 {
        let pass = VaePass::run(vae, &x, &mut stream(seed, Purpose::EncoderNoise, r))?;
        recon += pass.mean_recon();
        let mut sum_ne = 0.0;
        let mut sum_ce = 0.0;
        for ((&m, &lv), &v) in pass.post.mean.data().iter().zip(pass.post.logvar.data()).zip(pass.var.data()) {
            sum_ne += -0.5 * (1.0 + ln2pi + lv.f64());
            sum_ce += 0.5 * (m.f64() * m.f64() + v.f64() + ln2pi);
        }
        ne += sum_ne / pass.batch() as f64;
        ce += sum_ce / pass.batch() as f64;
    }
    let n = reps.max(1) as f64;
    Ok(LossBreakdown::new(recon / n, ne / n, ce / n, 0.0))
}

/// `E||eps - eps_theta||^2` at time `t` when `z0 ~ N(0, I)` and the prior
/// is the pure Normal branch.
pub fn fixed_point_residual(schedule: &SdeSchedule, t: f64, latent_dim: usize) -> Result<f64> {
    let k = schedule.kernel(t)?;
    let c = k.std() / k.ring_var;
    let zt_var = k.mean_coeff * k.mean_coeff + k.var;
    Ok(latent_dim as f64 * (1.0 - 2.0 * c * k.std() + c * c * zt_var))
}

/// `∫ (w(t) / 2) * fixed_point_residual(t) dt` over `[t_cutoff, 1]`.
pub fn analytic_dsm_integral(schedule: &SdeSchedule, mechanism: WeightingMechanism, latent_dim: usize) -> Result<f64> {
    let eps = schedule.t_cutoff();
    let f = |t: f64| -> Result<f64> {
        Ok(0.5 * mechanism.weight(schedule, t)? * fixed_point_residual(schedule, t, latent_dim)?)
    };
    // Geometric panels toward the lower end, where likelihood weights peak.
    let mut edges = vec![1.0];
    let mut h = 1.0 - eps;
    while h > 1e-9 && edges.len() < 40 {
        h *= 0.25;
        edges.push(eps + h);
    }
    edges.push(eps);
    edges.reverse();
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = 256;
        let hh = (b - a) / n as f64;
        let mut s = f(a)? + f(b)?;
        for i in 1..n {
            s += f(a + i as f64 * hh)? * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += s * hh / 3.0;
    }
    Ok(total)
}

/// Pure-Normal prior (`alpha = 0`) of dimension `latent_dim`.
pub fn normal_prior<F: Real>(latent_dim: usize) -> Result<MixedScoreNet<F>> {
    let spec = ScoreNetSpec {
        hidden: vec![4],
        ..ScoreNetSpec::default()
    };
    let mut p = MixedScoreNet::init(latent_dim, &spec, &mut stream(0, Purpose::Init, 0))?;
    p.set_alpha(0.0);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub mean: f64,
    pub std: f64,
    /// Standard error of `mean`.
    pub se: f64,
    /// Analytic expectation of the per-draw objective.
    pub analytic: f64,
    pub n_draws: usize,
}

/// Mean and std of the per-draw objective `combined_weight * ||eps - eps_theta||^2`
/// for `z0 ~ N(0, I)` and `alpha = 0`.
pub fn variance_diagnostic(
    schedule: &SdeSchedule,
    mechanism: WeightingMechanism,
    strategy: TSamplingStrategy,
    n_draws: usize,
    latent_dim: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if n_draws < 2 {
        return Err(Error::config("n_draws", "need at least two draws"));
    }
    let sampler = TimeSampler::new(*schedule, mechanism, strategy)?;
    let prior = normal_prior::<f64>(latent_dim)?;
    let chunk = 4096;
    let (mut sum, mut sum2) = (0.0, 0.0);
    let mut done = 0;
    let mut k = 0;
    while done < n_draws {
        let b = chunk.min(n_draws - done);
        let mut zrng = stream(seed, Purpose::Data, k);
        let z0: Vec<f64> = (0..b * latent_dim).map(|_| StandardNormal.sample(&mut zrng)).collect();
        let z0 = Tensor::matrix(b, latent_dim, z0)?;
        let pass = DsmPass::run(
            &prior,
            &sampler,
            &z0,
            &mut stream(seed, Purpose::PriorTime, k),
            &mut stream(seed, Purpose::PriorNoise, k),
        )?;
        for (w, l) in pass.weights(&sampler, mechanism)?.iter().zip(&pass.loss) {
            let v = w * l;
            sum += v;
            sum2 += v * v;
        }
        done += b;
        k += 1;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let std = ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0).sqrt();
    Ok(VarianceReport {
        mean,
        std,
        se: std / n.sqrt(),
        analytic: analytic_dsm_integral(schedule, mechanism, latent_dim)?,
        n_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_rel_error, numeric_input_grad, numeric_param_grads, randn_matrix};
    use crate::nn::Activation;
    use crate::vae::{DecoderKind, VaeSpec};
    use TSamplingStrategy::*;
    use WeightingMechanism::*;

    fn linear() -> SdeSchedule {
        SdeSchedule::linear_vpsde(0.1, 20.0, 0.0, Some(0.01)).unwrap()
    }

    #[test]
    fn constant_term() {
        let s = SdeSchedule::linear_vpsde(0.1, 20.0, 0.25, None).unwrap();
        assert!((ce_const(&s, 2) - (2.0 * PI * E * 0.25).ln()).abs() < 1e-12);
        let s = linear();
        let v = s.kernel(0.01).unwrap().var;
        assert!((ce_const(&s, 1) - 0.5 * (2.0 * PI * E * v).ln()).abs() < 1e-12);
    }

    #[test]
    fn breakdown_sums() {
        let l = LossBreakdown::new(1.0, -2.0, 3.5, 0.1);
        assert_eq!(l.nelbo, 2.5);
    }

    #[test]
    fn vp_likelihood_integral_is_log_variance_ratio() {
        // With sigma0^2 = 0 the Wll integrand is (D/2) d log var / dt.
        let s = linear();
        let got = analytic_dsm_integral(&s, Wll, 3).unwrap();
        let (v1, ve) = (s.kernel(1.0).unwrap().var, s.kernel(0.01).unwrap().var);
        assert!((got - 1.5 * (v1 / ve).ln()).abs() < 1e-7, "{got}");
    }

    #[test]
    fn geometric_integrand_is_constant() {
        let s = SdeSchedule::geometric_vpsde(3e-5, 0.999, None).unwrap();
        let vals: Vec<f64> = (0..100)
            .map(|i| {
                let t = s.t_cutoff() + (1.0 - s.t_cutoff()) * i as f64 / 99.0;
                0.5 * Wll.weight(&s, t).unwrap() * fixed_point_residual(&s, t, 1).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        for v in &vals {
            assert!((v - mean).abs() < 0.01 * mean, "{v} vs {mean}");
        }
        // Full integral: (D/2)(1 - eps) log(max / min).
        let want = 0.5 * (1.0 - s.t_cutoff()) * (0.999f64 / 3e-5).ln();
        let got = analytic_dsm_integral(&s, Wll, 1).unwrap();
        assert!((got - want).abs() < 0.01 * want, "{got} vs {want}");
    }

    #[test]
    fn ce_of_standard_normal_with_itself() {
        let s = SdeSchedule::linear_vpsde(0.1, 20.0, 3e-5, None).unwrap();
        let ce = analytic_dsm_integral(&s, Wll, 1).unwrap() + ce_const(&s, 1);
        assert!((ce - 0.5 * (2.0 * PI * E).ln()).abs() < 0.01, "{ce}");
    }

    #[test]
    fn estimator_is_unbiased_across_strategies() {
        let s = linear();
        let mut means = vec![];
        for st in [Uniform, ImportanceSampled] {
            let r = variance_diagnostic(&s, Wll, st, 100_000, 1, 3).unwrap();
            assert!((r.mean - r.analytic).abs() < 3.0 * r.se, "{r:?}");
            means.push(r);
        }
        let d = (means[0].mean - means[1].mean).abs();
        assert!(d < 3.0 * means[0].se.hypot(means[1].se));
    }

    #[test]
    fn likelihood_is_spreads_less_than_uniform() {
        let s = linear();
        let is = variance_diagnostic(&s, Wll, ImportanceSampled, 100_000, 1, 4).unwrap();
        let un = variance_diagnostic(&s, Wll, Uniform, 100_000, 1, 4).unwrap();
        assert!(is.std < un.std, "{} vs {}", is.std, un.std);
        // Per-t integrand is constant under IS: only eps-noise remains,
        // whose relative std for D = 1 is that of a chi-square-like draw.
        assert!(is.std / is.mean < 2.0);
    }

    fn small_models() -> (VaeBackbone<f64>, MixedScoreNet<f64>) {
        let spec = VaeSpec {
            data_dim: 3,
            latent_dim: 2,
            hidden: vec![5],
            activation: Activation::Tanh,
            decoder: DecoderKind::Gaussian,
        };
        let mut rng = stream(11, Purpose::Init, 0);
        let vae = VaeBackbone::init(&spec, &mut rng).unwrap();
        let pspec = ScoreNetSpec {
            hidden: vec![6],
            activation: Activation::Swish,
            time_embed_dim: 4,
        };
        let mut prior = MixedScoreNet::init(2, &pspec, &mut rng).unwrap();
        prior.set_alpha_logits(&[0.3, -0.4]).unwrap();
        // Perturb the zero-initialised last layer so the neural branch matters.
        for p in prior.eps_net_mut().layers_mut().last_mut().unwrap().w.iter_mut() {
            *p = 0.1 * rng.random::<f64>() - 0.05;
        }
        (vae, prior)
    }

    #[test]
    fn dsm_backward_matches_finite_differences() {
        let (_, prior) = small_models();
        let s = linear();
        let sampler = TimeSampler::new(s, Wll, ImportanceSampled).unwrap();
        let z0: Tensor<f64> = randn_matrix(4, 2, &mut stream(1, Purpose::Diagnostic, 0));
        let run = |p: &MixedScoreNet<f64>, z: &Tensor<f64>| {
            DsmPass::run(p, &sampler, z, &mut stream(2, Purpose::PriorTime, 0), &mut stream(2, Purpose::PriorNoise, 0))
                .unwrap()
        };
        let pass = run(&prior, &z0);
        let w = pass.weights(&sampler, Wll).unwrap();
        let (g, dz) = pass.backward(&prior, &w).unwrap();
        let loss = |p: &MixedScoreNet<f64>, z: &Tensor<f64>| run(p, z).weighted_mean(&w);
        let num_p = numeric_param_grads(&prior, |p| loss(p, &z0));
        assert!(max_rel_error(&g.flatten(), &num_p) < 1e-6);
        let num_z = numeric_input_grad(z0.data(), |zv| loss(&prior, &Tensor::matrix(4, 2, zv.to_vec()).unwrap()));
        assert!(max_rel_error(dz.data(), &num_z) < 1e-6);
    }

    #[test]
    fn vae_backward_matches_finite_differences() {
        let (vae, prior) = small_models();
        let s = linear();
        let sampler = TimeSampler::new(s, Wll, ImportanceSampled).unwrap();
        let x: Tensor<f64> = randn_matrix(4, 3, &mut stream(3, Purpose::Diagnostic, 0));
        // Full objective: recon + neg_entropy + 0.3 * KL + weighted DSM through z0.
        let objective = |v: &VaeBackbone<f64>| -> f64 {
            let pass = VaePass::run(v, &x, &mut stream(4, Purpose::EncoderNoise, 0)).unwrap();
            let dsm = DsmPass::run(
                &prior,
                &sampler,
                &pass.z0,
                &mut stream(4, Purpose::VaeTime, 0),
                &mut stream(4, Purpose::VaeNoise, 0),
            )
            .unwrap();
            let w = dsm.weights(&sampler, Wll).unwrap();
            let kl: f64 = pass.standard_kl().unwrap().iter().sum::<f64>() / 4.0;
            pass.mean_recon() + pass.mean_neg_entropy() + 0.3 * kl + dsm.weighted_mean(&w)
        };
        let pass = VaePass::run(&vae, &x, &mut stream(4, Purpose::EncoderNoise, 0)).unwrap();
        let dsm = DsmPass::run(
            &prior,
            &sampler,
            &pass.z0,
            &mut stream(4, Purpose::VaeTime, 0),
            &mut stream(4, Purpose::VaeNoise, 0),
        )
        .unwrap();
        let w = dsm.weights(&sampler, Wll).unwrap();
        let (_, dz0) = dsm.backward(&prior, &w).unwrap();
        let g = pass.backward(&vae, Some(&dz0), 1.0, 0.3).unwrap();
        let num = numeric_param_grads(&vae, objective);
        let err = max_rel_error(&g.flatten(), &num);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ce_estimate_runs_through_vae() {
        let (vae, prior) = small_models();
        let sampler = TimeSampler::new(linear(), Wll, ImportanceSampled).unwrap();
        let x: Tensor<f64> = randn_matrix(8, 3, &mut stream(5, Purpose::Diagnostic, 0));
        let v = cross_entropy_estimate(&vae, &prior, &sampler, &x, &mut stream(6, Purpose::Diagnostic, 0)).unwrap();
        assert!(v.is_finite());
    }
}
