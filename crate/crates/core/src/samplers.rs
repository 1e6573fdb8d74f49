//! Sampling and likelihood: probability-flow ODE with an adaptive
//! Dormand-Prince 5(4) integrator, reverse-SDE ancestral sampling,
//! instantaneous change-of-variables log-likelihood, NELBO evaluation and
//! the importance-weighted-bound bias probe.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::objectives::VaePass;
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::schedule::SdeSchedule;
use crate::score_prior::MixedScoreNet;
use crate::special::log_sum_exp;
use crate::vae::VaeBackbone;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSolverConfig {
    pub rtol: f64,
    pub atol: f64,
    #[serde(default = "default_t_start")]
    pub t_start: f64,
    /// Defaults to `max(t_cutoff, floor)` with floor `1e-5` when
    /// `sigma0^2 > 0`, else `1e-6`.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Integrate rows one at a time (in parallel) rather than jointly
    /// with shared steps.
    #[serde(default)]
    pub per_trajectory: bool,
}

fn default_t_start() -> f64 {
    1.0
}
fn default_max_steps() -> usize {
    10_000
}

impl Default for OdeSolverConfig {
    fn default() -> Self {
        OdeSolverConfig {
            rtol: 1e-5,
            atol: 1e-5,
            t_start: 1.0,
            t_end: None,
            max_steps: default_max_steps(),
            per_trajectory: false,
        }
    }
}

impl OdeSolverConfig {
    pub fn with_tol(rtol: f64, atol: f64) -> Self {
        OdeSolverConfig {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn t_end_for(&self, schedule: &SdeSchedule) -> f64 {
        self.t_end.unwrap_or_else(|| {
            let floor = if schedule.sigma2_0() > 0.0 { 1e-5 } else { 1e-6 };
            schedule.t_cutoff().max(floor)
        })
    }

    pub fn validate(&self, schedule: &SdeSchedule) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::config("rtol", "rtol and atol must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be positive"));
        }
        let t_end = self.t_end_for(schedule);
        if !(t_end >= 0.0 && t_end < self.t_start && self.t_start <= 1.0) {
            return Err(Error::config(
                "t_end",
                format!("need 0 <= t_end < t_start <= 1, got t_end={t_end}, t_start={}", self.t_start),
            ));
        }
        Ok(())
    }
}

/// Work counters of one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdeStats {
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl OdeStats {
    fn add(&mut self, o: OdeStats) {
        self.nfe += o.nfe;
        self.accepted += o.accepted;
        self.rejected += o.rejected;
    }
}

const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth minus embedded fourth order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_ALPHA: f64 = 0.7 / 5.0;
const PI_BETA: f64 = 0.4 / 5.0;

fn rms_norm(v: &[f64], scale: &[f64]) -> f64 {
    (v.iter().zip(scale).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Right-hand side `f(t, y, out)` for [`dopri5`].
pub type OdeRhs<'a> = dyn FnMut(f64, &[f64], &mut [f64]) -> Result<()> + 'a;

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (either direction) with
/// Dormand-Prince 5(4), a PI step controller and FSAL stage reuse.
pub fn dopri5(
    f: &mut OdeRhs<'_>,
    y0: &[f64],
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<(Vec<f64>, OdeStats)> {
    let n = y0.len();
    let mut stats = OdeStats::default();
    let mut y = y0.to_vec();
    if t0 == t1 || n == 0 {
        return Ok((y, stats));
    }
    let dir = (t1 - t0).signum();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut eval = |t: f64, y: &[f64], out: &mut [f64], stats: &mut OdeStats| -> Result<()> {
        stats.nfe += 1;
        f(t, y, out)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("non-finite derivative at t={t}")));
        }
        Ok(())
    };
    eval(t0, &y, &mut k[0], &mut stats)?;

    // Initial step from the usual two-evaluation heuristic.
    let scale: Vec<f64> = y.iter().map(|v| atol + rtol * v.abs()).collect();
    let d0 = rms_norm(&y, &scale);
    let d1 = rms_norm(&k[0], &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min((t1 - t0).abs());
    let y1: Vec<f64> = y.iter().zip(&k[0]).map(|(a, b)| a + dir * h0 * b).collect();
    let mut f1 = vec![0.0; n];
    eval(t0 + dir * h0, &y1, &mut f1, &mut stats)?;
    let diff: Vec<f64> = f1.iter().zip(&k[0]).map(|(a, b)| a - b).collect();
    let d2 = rms_norm(&diff, &scale) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let mut h = (100.0 * h0).min(h1).min((t1 - t0).abs());

    let mut t = t0;
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut sc = vec![0.0; n];
    while (t1 - t) * dir > 0.0 {
        if stats.accepted + stats.rejected >= max_steps {
            return Err(Error::Solver(format!("max_steps={max_steps} exceeded at t={t}")));
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Solver(format!("step size underflow at t={t}")));
        }
        let last = h >= (t1 - t).abs();
        let hs = if last { t1 - t } else { dir * h };
        for s in 0..6 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in A[s].iter().enumerate() {
                    acc += a * k[j][i];
                }
                ytmp[i] = y[i] + hs * acc;
            }
            let (head, tail) = k.split_at_mut(s + 1);
            let _ = head;
            eval(t + C[s] * hs, &ytmp, &mut tail[0], &mut stats)?;
            if s == 5 {
                ynew.copy_from_slice(&ytmp);
            }
        }
        for i in 0..n {
            let mut e = 0.0;
            for (j, ej) in E.iter().enumerate() {
                e += ej * k[j][i];
            }
            err[i] = hs * e;
            sc[i] = atol + rtol * y[i].abs().max(ynew[i].abs());
        }
        let en = rms_norm(&err, &sc);
        if en <= 1.0 {
            stats.accepted += 1;
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            k.swap(0, 6);
            let mut fac = if en == 0.0 {
                FAC_MAX
            } else {
                SAFETY * en.powf(-PI_ALPHA) * err_prev.powf(PI_BETA)
            };
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = hs.abs() * fac;
            err_prev = en.max(1e-4);
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h = hs.abs() * (SAFETY * en.powf(-PI_ALPHA)).max(FAC_MIN);
            last_rejected = true;
        }
    }
    Ok((y, stats))
}

/// `f(t) z - g(t)^2 / 2 * score(z, t)`, written through `eps_theta` as
/// `f z + g^2 / (2 sigma) eps_theta`.
pub fn probability_flow_rhs<F: Real>(
    prior: &MixedScoreNet<F>,
    schedule: &SdeSchedule,
    z: &Tensor<F>,
    t: f64,
) -> Result<Tensor<F>> {
    let (f, g2, sigma) = flow_coeffs(schedule, t)?;
    let eps = prior.eps_theta(schedule, z, &[t])?;
    let mut out = eps;
    for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
        *o = F::of(f * zv.f64() + g2 / (2.0 * sigma) * o.f64());
    }
    Ok(out)
}

fn flow_coeffs(schedule: &SdeSchedule, t: f64) -> Result<(f64, f64, f64)> {
    let sigma = schedule.kernel(t)?.std();
    if sigma <= 0.0 {
        return Err(Error::Domain(format!("probability flow undefined at t={t}: sigma_t = 0")));
    }
    Ok((schedule.drift_coeff(t)?, schedule.g2(t)?, sigma))
}

/// Latents at `t = 1` drawn from the prior's terminal Normal.
pub fn prior_draws<R: Rng + ?Sized>(schedule: &SdeSchedule, n: usize, latent_dim: usize, rng: &mut R) -> Tensor<f64> {
    let s = schedule.prior_var().sqrt();
    let d = (0..n * latent_dim)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            s * e
        })
        .collect::<Vec<f64>>();
    Tensor::matrix(n, latent_dim, d).expect("sizes agree")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub z0: Tensor<f64>,
    pub stats: OdeStats,
}

fn flow_solve(
    prior: &MixedScoreNet<f64>,
    schedule: &SdeSchedule,
    z: &Tensor<f64>,
    t0: f64,
    t1: f64,
    cfg: &OdeSolverConfig,
) -> Result<(Tensor<f64>, OdeStats)> {
    let (b, d) = (z.rows(), z.cols());
    let mut rhs = |t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let zt = Tensor::matrix(b, d, y.to_vec())?;
        out.copy_from_slice(probability_flow_rhs(prior, schedule, &zt, t)?.data());
        Ok(())
    };
    let (y, st) = dopri5(&mut rhs, z.data(), t0, t1, cfg.rtol, cfg.atol, cfg.max_steps)?;
    Ok((Tensor::matrix(b, d, y)?, st))
}

/// Integrates the probability flow from `t_start` down to `t_end`.
pub fn ode_sample<F: Real>(
    prior: &MixedScoreNet<F>,
    schedule: &SdeSchedule,
    z1: &Tensor<f64>,
    cfg: &OdeSolverConfig,
) -> Result<SampleResult> {
    cfg.validate(schedule)?;
    let p64 = prior.cast::<f64>();
    let (t0, t1) = (cfg.t_start, cfg.t_end_for(schedule));
    if !cfg.per_trajectory {
        let (z0, stats) = flow_solve(&p64, schedule, z1, t0, t1, cfg)?;
        return Ok(SampleResult { z0, stats });
    }
    let d = z1.cols();
    let rows: Vec<(Vec<f64>, OdeStats)> = (0..z1.rows())
        .into_par_iter()
        .map(|i| {
            let zi = Tensor::matrix(1, d, z1.row(i).to_vec())?;
            let (z, st) = flow_solve(&p64, schedule, &zi, t0, t1, cfg)?;
            Ok((z.into_data(), st))
        })
        .collect::<Result<_>>()?;
    let mut stats = OdeStats::default();
    let mut data = Vec::with_capacity(z1.len());
    for (r, st) in rows {
        data.extend(r);
        stats.add(st);
    }
    Ok(SampleResult {
        z0: Tensor::matrix(z1.rows(), d, data)?,
        stats,
    })
}

/// Euler-Maruyama on the reverse SDE
/// `dz = [f z - g^2 score] dt + g dw` over a uniform grid from 1 to `t_end`.
pub fn ancestral_sample<F: Real, R: Rng + ?Sized>(
    prior: &MixedScoreNet<F>,
    schedule: &SdeSchedule,
    z1: &Tensor<f64>,
    n_steps: usize,
    t_end: f64,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    if n_steps < 1 {
        return Err(Error::config("n_steps", "need at least one step"));
    }
    if !(0.0..1.0).contains(&t_end) {
        return Err(Error::config("t_end", format!("must lie in [0, 1), got {t_end}")));
    }
    let p64 = prior.cast::<f64>();
    let h = (1.0 - t_end) / n_steps as f64;
    let mut z = z1.clone();
    for k in 0..n_steps {
        let t = 1.0 - k as f64 * h;
        let (f, g2, sigma) = flow_coeffs(schedule, t)?;
        let eps = p64.eps_theta(schedule, &z, &[t])?;
        let g = (g2 * h).sqrt();
        for (zv, &e) in z.data_mut().iter_mut().zip(eps.data()) {
            let score = -e / sigma;
            let noise: f64 = StandardNormal.sample(rng);
            *zv = *zv - h * (f * *zv - g2 * score) + g * noise;
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodResult {
    /// Per-row `log p(z0)`.
    pub logp: Vec<f64>,
    /// Per-row standard error over probes (0 in exact mode or with one probe).
    pub std_err: Vec<f64>,
    pub stats: OdeStats,
}

/// Per-row `log N(z; 0, var I)`.
pub fn normal_logpdf(z: &Tensor<f64>, var: f64) -> Vec<f64> {
    let d = z.cols() as f64;
    (0..z.rows())
        .map(|i| {
            let sq: f64 = z.row(i).iter().map(|v| v * v).sum();
            -0.5 * (d * (2.0 * PI * var).ln() + sq / var)
        })
        .collect()
}

/// `log p(z0)` via the instantaneous change of variables: integrate
/// `[z, div]` from `t_end` to `t_start` and add the terminal Normal density.
///
/// `n_probes == 0` uses the exact Jacobian trace; otherwise each row carries
/// `n_probes` divergence accumulators, each with its own Rademacher probe
/// fixed along the trajectory.
pub fn ode_log_likelihood<F: Real, R: Rng + ?Sized>(
    prior: &MixedScoreNet<F>,
    schedule: &SdeSchedule,
    z0: &Tensor<f64>,
    cfg: &OdeSolverConfig,
    n_probes: usize,
    rng: &mut R,
) -> Result<LikelihoodResult> {
    cfg.validate(schedule)?;
    let p64 = prior.cast::<f64>();
    let (b, d) = (z0.rows(), z0.cols());
    let np = n_probes.max(1);
    let probes: Vec<Tensor<f64>> = (0..n_probes)
        .map(|_| {
            let v = (0..b * d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            Tensor::matrix(b, d, v).expect("sizes agree")
        })
        .collect();
    let (t0, t1) = (cfg.t_end_for(schedule), cfg.t_start);
    let solve = |rows: &[usize]| -> Result<(Vec<f64>, OdeStats)> {
        let nb = rows.len();
        let mut y0 = Vec::with_capacity(nb * (d + np));
        for &i in rows {
            y0.extend_from_slice(z0.row(i));
        }
        y0.extend(std::iter::repeat_n(0.0, nb * np));
        let sub_probes: Vec<Tensor<f64>> = probes
            .iter()
            .map(|p| {
                let mut v = Vec::with_capacity(nb * d);
                for &i in rows {
                    v.extend_from_slice(p.row(i));
                }
                Tensor::matrix(nb, d, v).expect("sizes agree")
            })
            .collect();
        let mut rhs = |t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
            let (f, g2, sigma) = flow_coeffs(schedule, t)?;
            let z = Tensor::matrix(nb, d, y[..nb * d].to_vec())?;
            let c = g2 / (2.0 * sigma);
            let write = |out: &mut [f64], eps: &Tensor<f64>| {
                for ((o, &zv), &e) in out[..nb * d].iter_mut().zip(z.data()).zip(eps.data()) {
                    *o = f * zv + c * e;
                }
            };
            if n_probes == 0 {
                let (eps, tr) = p64.eps_jacobian_trace_exact(schedule, &z, &[t])?;
                write(out, &eps);
                for (o, tr) in out[nb * d..].iter_mut().zip(tr) {
                    *o = f * d as f64 + c * tr;
                }
            } else {
                for (k, p) in sub_probes.iter().enumerate() {
                    let (eps, quad) = p64.eps_jacobian_probe(schedule, &z, &[t], p)?;
                    if k == 0 {
                        write(out, &eps);
                    }
                    for (i, q) in quad.iter().enumerate() {
                        out[nb * d + i * np + k] = f * d as f64 + c * q;
                    }
                }
            }
            Ok(())
        };
        dopri5(&mut rhs, &y0, t0, t1, cfg.rtol, cfg.atol, cfg.max_steps)
    };
    let prior_var = schedule.prior_var();
    let finish = |rows: &[usize], y: &[f64]| -> Vec<(f64, f64)> {
        let nb = rows.len();
        let z1 = Tensor::matrix(nb, d, y[..nb * d].to_vec()).expect("sizes agree");
        let base = normal_logpdf(&z1, prior_var);
        (0..nb)
            .map(|i| {
                let acc = &y[nb * d + i * np..nb * d + (i + 1) * np];
                let mean = acc.iter().sum::<f64>() / np as f64;
                let se = if np > 1 {
                    (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (np - 1) as f64 / np as f64).sqrt()
                } else {
                    0.0
                };
                (base[i] + mean, se)
            })
            .collect()
    };
    let mut stats = OdeStats::default();
    let mut out = Vec::with_capacity(b);
    if cfg.per_trajectory {
        let rows: Vec<(Vec<(f64, f64)>, OdeStats)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let (y, st) = solve(&[i])?;
                Ok((finish(&[i], &y), st))
            })
            .collect::<Result<_>>()?;
        for (r, st) in rows {
            out.extend(r);
            stats.add(st);
        }
    } else {
        let all: Vec<usize> = (0..b).collect();
        let (y, st) = solve(&all)?;
        out = finish(&all, &y);
        stats = st;
    }
    Ok(LikelihoodResult {
        logp: out.iter().map(|v| v.0).collect(),
        std_err: out.iter().map(|v| v.1).collect(),
        stats,
    })
}

/// Hutchinson estimate of `tr(J)` from Rademacher probes, given
/// `v -> J v`. Returns (mean, standard error).
pub fn hutchinson_trace<R: Rng + ?Sized>(
    matvec: &dyn Fn(&[f64]) -> Vec<f64>,
    dim: usize,
    n_probes: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut v = vec![0.0; dim];
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n_probes {
        for x in v.iter_mut() {
            *x = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let q: f64 = matvec(&v).iter().zip(&v).map(|(a, b)| a * b).sum();
        sum += q;
        sum2 += q * q;
    }
    let n = n_probes as f64;
    let mean = sum / n;
    let var = if n_probes > 1 { ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelboReport {
    /// Mean NELBO in nats per datapoint.
    pub nelbo: f64,
    /// Standard error over datapoints.
    pub std_err: f64,
    pub recon: f64,
    pub neg_entropy: f64,
    /// Mean `-log p(z0)`.
    pub neg_log_prior: f64,
    pub n: usize,
    pub nfe: usize,
}

/// `recon + log q(z0|x) - log p(z0)` with one posterior sample per
/// datapoint and an ODE estimate of `log p(z0)`.
pub fn eval_nelbo<F: Real>(
    vae: &VaeBackbone<F>,
    prior: &MixedScoreNet<F>,
    schedule: &SdeSchedule,
    data: &Dataset,
    cfg: &OdeSolverConfig,
    n_probes: usize,
    seed: u64,
) -> Result<NelboReport> {
    let vae64 = vae.cast::<f64>();
    let x: Tensor<f64> = data.epoch_data(0).cast();
    let chunk = 256;
    let mut per_point = Vec::with_capacity(x.rows());
    let (mut recon, mut ne, mut nlp) = (0.0, 0.0, 0.0);
    let mut nfe = 0;
    for (ci, start) in (0..x.rows()).step_by(chunk).enumerate() {
        let end = (start + chunk).min(x.rows());
        let xb = Tensor::matrix(end - start, x.cols(), x.data()[start * x.cols()..end * x.cols()].to_vec())?;
        let pass = VaePass::run(&vae64, &xb, &mut stream(seed, Purpose::EncoderNoise, ci as u64))?;
        let lik = ode_log_likelihood(
            prior,
            schedule,
            &pass.z0,
            cfg,
            n_probes,
            &mut stream(seed, Purpose::Probes, ci as u64),
        )?;
        nfe += lik.stats.nfe;
        for i in 0..pass.batch() {
            let v = pass.recon[i] + pass.neg_entropy[i] - lik.logp[i];
            recon += pass.recon[i];
            ne += pass.neg_entropy[i];
            nlp -= lik.logp[i];
            per_point.push(v);
        }
    }
    let n = per_point.len() as f64;
    let mean = per_point.iter().sum::<f64>() / n;
    let var = per_point.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(NelboReport {
        nelbo: mean,
        std_err: (var / n).sqrt(),
        recon: recon / n,
        neg_entropy: ne / n,
        neg_log_prior: nlp / n,
        n: per_point.len(),
        nfe,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IwBiasReport {
    /// `mean(IW estimate) - true value`.
    pub bias: f64,
    pub std_err: f64,
    /// Second-order prediction `(s^2 / 2) * tr(H)` with `H` the Hessian of
    /// log-sum-exp at the true log-weights.
    pub predicted: f64,
}

/// Simulates `log(1/K sum exp(w_k + s eps_k))` against the noiseless value,
/// with `w_k = true_logps[k % len]`.
pub fn iw_bias_probe<R: Rng + ?Sized>(
    true_logps: &[f64],
    noise_var: f64,
    k: usize,
    n_trials: usize,
    rng: &mut R,
) -> Result<IwBiasReport> {
    if true_logps.is_empty() || k == 0 || n_trials < 2 {
        return Err(Error::config("iw_bias", "need log-weights, K >= 1 and at least two trials"));
    }
    if noise_var.is_nan() || noise_var < 0.0 {
        return Err(Error::config("noise_var", "must be non-negative"));
    }
    let w: Vec<f64> = (0..k).map(|i| true_logps[i % true_logps.len()]).collect();
    let truth = log_sum_exp(&w) - (k as f64).ln();
    let s = noise_var.sqrt();
    let mut buf = vec![0.0; k];
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n_trials {
        for (b, &wi) in buf.iter_mut().zip(&w) {
            let e: f64 = StandardNormal.sample(rng);
            *b = wi + s * e;
        }
        let d = log_sum_exp(&buf) - (k as f64).ln() - truth;
        sum += d;
        sum2 += d * d;
    }
    let n = n_trials as f64;
    let bias = sum / n;
    let var = ((sum2 - n * bias * bias) / (n - 1.0)).max(0.0);
    let lse = log_sum_exp(&w);
    let p2: f64 = w.iter().map(|wi| (wi - lse).exp().powi(2)).sum();
    Ok(IwBiasReport {
        bias,
        std_err: (var / n).sqrt(),
        predicted: 0.5 * noise_var * (1.0 - p2),
    })
}
