//! VAE backbone: diagonal-Normal encoder, Bernoulli or diagonal-Normal
//! decoder, and the analytic terms of the ELBO.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{Activation, Cache, DenseNet, Grads, NetSpec, Parameterized, Tensor};
use crate::real::Real;

pub const LOGVAR_MIN: f64 = -15.0;
pub const LOGVAR_MAX: f64 = 5.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Bernoulli,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub decoder: DecoderKind,
}

/// Encoder output for a batch; `logvar` is already clamped.
#[derive(Debug, Clone)]
pub struct Posterior<F> {
    pub mean: Tensor<F>,
    pub logvar: Tensor<F>,
    /// 1 where the raw log-variance was inside the clamp range.
    active: Vec<bool>,
}

impl<F: Real> Posterior<F> {
    pub fn var(&self) -> Tensor<F> {
        self.logvar.map(|v| v.exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeBackbone<F = f32> {
    encoder: DenseNet<F>,
    decoder: DenseNet<F>,
    spec: VaeSpec,
}

fn clamp_logvar<F: Real>(v: F) -> (F, bool) {
    let x = v.f64();
    if x < LOGVAR_MIN {
        (F::of(LOGVAR_MIN), false)
    } else if x > LOGVAR_MAX {
        (F::of(LOGVAR_MAX), false)
    } else {
        (v, true)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<F: Real> VaeBackbone<F> {
    pub fn init<R: Rng + ?Sized>(spec: &VaeSpec, rng: &mut R) -> Result<Self> {
        if spec.latent_dim == 0 || spec.data_dim == 0 {
            return Err(Error::config("vae", "data_dim and latent_dim must be positive"));
        }
        let enc = NetSpec {
            input_dim: spec.data_dim,
            hidden: spec.hidden.clone(),
            output_dim: 2 * spec.latent_dim,
            activation: spec.activation,
            time_embed_dim: 0,
            zero_last: false,
        };
        let dec_out = match spec.decoder {
            DecoderKind::Bernoulli => spec.data_dim,
            DecoderKind::Gaussian => 2 * spec.data_dim,
        };
        let dec = NetSpec {
            input_dim: spec.latent_dim,
            hidden: spec.hidden.iter().rev().cloned().collect(),
            output_dim: dec_out,
            activation: spec.activation,
            time_embed_dim: 0,
            zero_last: false,
        };
        Ok(VaeBackbone {
            encoder: DenseNet::init(&enc, rng)?,
            decoder: DenseNet::init(&dec, rng)?,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    pub fn encoder(&self) -> &DenseNet<F> {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet<F> {
        &self.decoder
    }

    pub fn cast<G: Real>(&self) -> VaeBackbone<G> {
        VaeBackbone {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            spec: self.spec.clone(),
        }
    }

    fn split_encoder_output(&self, out: &Tensor<F>) -> Result<Posterior<F>> {
        let d = self.spec.latent_dim;
        let b = out.rows();
        let mut mean = Vec::with_capacity(b * d);
        let mut logvar = Vec::with_capacity(b * d);
        let mut active = Vec::with_capacity(b * d);
        for i in 0..b {
            let r = out.row(i);
            mean.extend_from_slice(&r[..d]);
            for &v in &r[d..] {
                let (c, a) = clamp_logvar(v);
                logvar.push(c);
                active.push(a);
            }
        }
        let post = Posterior {
            mean: Tensor::matrix(b, d, mean)?,
            logvar: Tensor::matrix(b, d, logvar)?,
            active,
        };
        post.mean.check_finite("encoder mean")?;
        post.logvar.check_finite("encoder log-variance")?;
        Ok(post)
    }

    /// `q(z0 | x)` as (mean, clamped log-variance).
    pub fn encode(&self, x: &Tensor<F>) -> Result<Posterior<F>> {
        let out = self.encoder.forward(x, None)?;
        self.split_encoder_output(&out)
    }

    pub fn encode_cached(&self, x: &Tensor<F>) -> Result<(Posterior<F>, Cache<F>)> {
        let (out, cache) = self.encoder.forward_cached(x, None)?;
        Ok((self.split_encoder_output(&out)?, cache))
    }

    /// Encoder gradients given upstream gradients on mean and (clamped) log-variance.
    pub fn encoder_backward(
        &self,
        cache: &Cache<F>,
        post: &Posterior<F>,
        d_mean: &Tensor<F>,
        d_logvar: &Tensor<F>,
    ) -> Result<Grads<F>> {
        let d = self.spec.latent_dim;
        let b = post.mean.rows();
        let mut up = vec![F::zero(); b * 2 * d];
        for i in 0..b {
            for j in 0..d {
                up[i * 2 * d + j] = d_mean.row(i)[j];
                if post.active[i * d + j] {
                    up[i * 2 * d + d + j] = d_logvar.row(i)[j];
                }
            }
        }
        let (g, _) = self.encoder.backward(cache, &Tensor::matrix(b, 2 * d, up)?)?;
        Ok(g)
    }

    pub fn decode(&self, z0: &Tensor<F>) -> Result<Tensor<F>> {
        self.decoder.forward(z0, None)
    }

    pub fn decode_cached(&self, z0: &Tensor<F>) -> Result<(Tensor<F>, Cache<F>)> {
        self.decoder.forward_cached(z0, None)
    }

    /// Per-row `-log p(x | z0)` from decoder outputs, plus its gradient with
    /// respect to those outputs.
    pub fn recon_nll_and_grad(&self, x: &Tensor<F>, out: &Tensor<F>) -> Result<(Vec<f64>, Tensor<F>)> {
        let n = self.spec.data_dim;
        if x.cols() != n || x.rows() != out.rows() {
            return Err(Error::shape(format!("[{}, {n}]", out.rows()), format!("{:?}", x.shape())));
        }
        let mut nll = vec![0.0; x.rows()];
        let mut grad = vec![F::zero(); out.len()];
        let w = out.cols();
        for i in 0..x.rows() {
            let (xr, o) = (x.row(i), out.row(i));
            let g = &mut grad[i * w..(i + 1) * w];
            match self.spec.decoder {
                DecoderKind::Bernoulli => {
                    for k in 0..n {
                        let (xv, l) = (xr[k].f64(), o[k].f64());
                        nll[i] += softplus(l) - xv * l;
                        g[k] = F::of(crate::special::sigmoid(l) - xv);
                    }
                }
                DecoderKind::Gaussian => {
                    for k in 0..n {
                        let (xv, mu) = (xr[k].f64(), o[k].f64());
                        let (lv, active) = clamp_logvar(o[n + k]);
                        let lv = lv.f64();
                        let r2 = (xv - mu) * (xv - mu) * (-lv).exp();
                        nll[i] += 0.5 * (LN_2PI + lv + r2);
                        g[k] = F::of(-(xv - mu) * (-lv).exp());
                        if active {
                            g[n + k] = F::of(0.5 * (1.0 - r2));
                        }
                    }
                }
            }
        }
        Ok((nll, Tensor::matrix(x.rows(), w, grad)?))
    }

    /// Per-row `-log p(x | z0)`.
    pub fn recon_term(&self, x: &Tensor<F>, z0: &Tensor<F>) -> Result<Vec<f64>> {
        let out = self.decode(z0)?;
        Ok(self.recon_nll_and_grad(x, &out)?.0)
    }

    /// Decoder parameter gradients and the gradient with respect to `z0`.
    pub fn decoder_backward(&self, cache: &Cache<F>, d_out: &Tensor<F>) -> Result<(Grads<F>, Tensor<F>)> {
        self.decoder.backward(cache, d_out)
    }

    /// Mean of `p(x | z0)`: probabilities for Bernoulli, means for Gaussian.
    pub fn decode_mean(&self, z0: &Tensor<F>) -> Result<Tensor<F>> {
        let out = self.decode(z0)?;
        let n = self.spec.data_dim;
        let mut m = Vec::with_capacity(out.rows() * n);
        for i in 0..out.rows() {
            for &v in &out.row(i)[..n] {
                m.push(match self.spec.decoder {
                    DecoderKind::Bernoulli => F::of(crate::special::sigmoid(v.f64())),
                    DecoderKind::Gaussian => v,
                });
            }
        }
        Tensor::matrix(out.rows(), n, m)
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.param_slices().len()
    }
}

impl<F: Real> Parameterized<F> for VaeBackbone<F> {
    fn param_slices(&self) -> Vec<&[F]> {
        let mut v = self.encoder.param_slices();
        v.extend(self.decoder.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.encoder.param_slices_mut();
        v.extend(self.decoder.param_slices_mut());
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.encoder.param_names().into_iter().map(|n| format!("encoder.{n}")).collect();
        v.extend(self.decoder.param_names().into_iter().map(|n| format!("decoder.{n}")));
        v
    }
}

/// `z0 = mean + sqrt(var) * eps`.
pub fn reparam_sample<F: Real>(mean: &Tensor<F>, var: &Tensor<F>, eps: &Tensor<F>) -> Result<Tensor<F>> {
    if mean.shape() != var.shape() || mean.shape() != eps.shape() {
        return Err(Error::shape(format!("{:?}", mean.shape()), format!("{:?} / {:?}", var.shape(), eps.shape())));
    }
    let d: Vec<F> = mean
        .data()
        .iter()
        .zip(var.data())
        .zip(eps.data())
        .map(|((&m, &v), &e)| m + v.sqrt() * e)
        .collect();
    Tensor::new(mean.shape().to_vec(), d)
}

/// Per-row `log N(z0; mean, diag(var))`, the negative-entropy integrand.
pub fn neg_entropy_term<F: Real>(mean: &Tensor<F>, var: &Tensor<F>, z0: &Tensor<F>) -> Result<Vec<f64>> {
    if mean.shape() != var.shape() || mean.shape() != z0.shape() {
        return Err(Error::shape(format!("{:?}", mean.shape()), format!("{:?}", z0.shape())));
    }
    Ok((0..mean.rows())
        .map(|i| {
            mean.row(i)
                .iter()
                .zip(var.row(i))
                .zip(z0.row(i))
                .map(|((&m, &v), &z)| {
                    let (m, v, z) = (m.f64(), v.f64(), z.f64());
                    -0.5 * (LN_2PI + v.ln() + (z - m) * (z - m) / v)
                })
                .sum()
        })
        .collect())
}

/// Per-row `KL(N(mean, var) || N(0, I))`.
pub fn standard_kl<F: Real>(mean: &Tensor<F>, var: &Tensor<F>) -> Result<Vec<f64>> {
    if mean.shape() != var.shape() {
        return Err(Error::shape(format!("{:?}", mean.shape()), format!("{:?}", var.shape())));
    }
    Ok((0..mean.rows())
        .map(|i| {
            mean.row(i)
                .iter()
                .zip(var.row(i))
                .map(|(&m, &v)| {
                    let (m, v) = (m.f64(), v.f64());
                    0.5 * (m * m + v - 1.0 - v.ln())
                })
                .sum()
        })
        .collect())
}

/// Per-row `log N(z; 0, I)`.
pub fn standard_normal_logpdf<F: Real>(z: &Tensor<F>) -> Vec<f64> {
    (0..z.rows())
        .map(|i| {
            z.row(i)
                .iter()
                .map(|&v| -0.5 * (LN_2PI + v.f64() * v.f64()))
                .sum()
        })
        .collect()
}

/// Synthetic two-group hierarchical prior
/// `p(z1) = N(mu1, diag(s1^2))`, `p(z2 | z1) = N(A z1 + b, diag(exp(2 (C z1 + c))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierGroupParams {
    pub d1: usize,
    pub d2: usize,
    pub mu1: Vec<f64>,
    pub log_sigma1: Vec<f64>,
    /// `d2 x d1`, row-major.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `d2 x d1`, row-major.
    pub c: Vec<f64>,
    pub c0: Vec<f64>,
}

impl HierGroupParams {
    pub fn identity(d1: usize, d2: usize) -> Self {
        HierGroupParams {
            d1,
            d2,
            mu1: vec![0.0; d1],
            log_sigma1: vec![0.0; d1],
            a: vec![0.0; d2 * d1],
            b: vec![0.0; d2],
            c: vec![0.0; d2 * d1],
            c0: vec![0.0; d2],
        }
    }

    pub fn random<R: Rng + ?Sized>(d1: usize, d2: usize, rng: &mut R) -> Self {
        let mut u = |s: f64| rng.random_range(-s..s);
        HierGroupParams {
            d1,
            d2,
            mu1: (0..d1).map(|_| u(1.0)).collect(),
            log_sigma1: (0..d1).map(|_| u(0.7)).collect(),
            a: (0..d2 * d1).map(|_| u(1.0)).collect(),
            b: (0..d2).map(|_| u(1.0)).collect(),
            c: (0..d2 * d1).map(|_| u(0.3)).collect(),
            c0: (0..d2).map(|_| u(0.5)).collect(),
        }
    }

    fn group2(&self, z1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut mu = self.b.clone();
        let mut ls = self.c0.clone();
        for r in 0..self.d2 {
            for k in 0..self.d1 {
                mu[r] += self.a[r * self.d1 + k] * z1[k];
                ls[r] += self.c[r * self.d1 + k] * z1[k];
            }
        }
        (mu, ls)
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d1 + self.d2 {
            return Err(Error::shape(self.d1 + self.d2, z.len()));
        }
        Ok(())
    }

    /// Direct evaluation of `log p(z1) + log p(z2 | z1)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        let (z1, z2) = z.split_at(self.d1);
        let normal = |x: f64, m: f64, ls: f64| -0.5 * LN_2PI - ls - 0.5 * ((x - m) / ls.exp()).powi(2);
        let mut lp = 0.0;
        for k in 0..self.d1 {
            lp += normal(z1[k], self.mu1[k], self.log_sigma1[k]);
        }
        let (mu, ls) = self.group2(z1);
        for r in 0..self.d2 {
            lp += normal(z2[r], mu[r], ls[r]);
        }
        Ok(lp)
    }
}

/// Maps grouped latents to standard-Normal coordinates,
/// `eps_l = (z_l - mu_l(z_<l)) / sigma_l(z_<l)`, returning `(eps, log|det d eps/dz|)`.
pub fn hier_to_standard(groups: &HierGroupParams, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    groups.check(z)?;
    let (z1, z2) = z.split_at(groups.d1);
    let mut eps = Vec::with_capacity(z.len());
    let mut logdet = 0.0;
    for k in 0..groups.d1 {
        eps.push((z1[k] - groups.mu1[k]) / groups.log_sigma1[k].exp());
        logdet -= groups.log_sigma1[k];
    }
    let (mu, ls) = groups.group2(z1);
    for r in 0..groups.d2 {
        eps.push((z2[r] - mu[r]) / ls[r].exp());
        logdet -= ls[r];
    }
    Ok((eps, logdet))
}

/// Inverse of [`hier_to_standard`].
pub fn standard_to_hier(groups: &HierGroupParams, eps: &[f64]) -> Result<Vec<f64>> {
    groups.check(eps)?;
    let (e1, e2) = eps.split_at(groups.d1);
    let z1: Vec<f64> = (0..groups.d1)
        .map(|k| groups.mu1[k] + groups.log_sigma1[k].exp() * e1[k])
        .collect();
    let (mu, ls) = groups.group2(&z1);
    let mut z = z1;
    for r in 0..groups.d2 {
        z.push(mu[r] + ls[r].exp() * e2[r]);
    }
    Ok(z)
}

/// `-0.5 * sum(1 + log(2 pi var))`: the expected log-density under `q`.
pub fn expected_neg_entropy(var: &[f64]) -> f64 {
    var.iter().map(|v| -0.5 * (1.0 + (2.0 * PI * v).ln())).sum()
}
