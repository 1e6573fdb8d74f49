//! Diffusion-time sampling: weighting mechanisms and their minimum-variance
//! importance-sampling proposals on `[t_cutoff, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::schedule::{ScheduleParams, SdeKind, SdeSchedule};
use crate::special::{erf, erfinv};

/// Objective weighting `w(t)` applied to the denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMechanism {
    /// `g^2 / sigma^2`: maximum-likelihood weighting.
    Wll,
    /// `1`
    Wun,
    /// `g^2`
    Wre,
}

impl WeightingMechanism {
    pub const ALL: [WeightingMechanism; 3] =
        [WeightingMechanism::Wll, WeightingMechanism::Wun, WeightingMechanism::Wre];

    pub fn name(self) -> &'static str {
        match self {
            WeightingMechanism::Wll => "wll",
            WeightingMechanism::Wun => "wun",
            WeightingMechanism::Wre => "wre",
        }
    }

    /// `w(t)` for this mechanism under `schedule`.
    pub fn weight(self, schedule: &SdeSchedule, t: f64) -> Result<f64> {
        Ok(match self {
            WeightingMechanism::Wll => schedule.g2(t)? / schedule.kernel(t)?.var,
            WeightingMechanism::Wun => 1.0,
            WeightingMechanism::Wre => schedule.g2(t)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TSamplingStrategy {
    Uniform,
    ImportanceSampled,
}

impl TSamplingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            TSamplingStrategy::Uniform => "uniform",
            TSamplingStrategy::ImportanceSampled => "is",
        }
    }
}

/// One diffusion-time draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TDraw {
    pub t: f64,
    /// `1 / r(t)`, or `1 - t_cutoff` for uniform sampling.
    pub is_weight: f64,
    /// `w(t)` of the sampler's mechanism.
    pub obj_weight: f64,
}

/// Resolved proposal density with precomputed normalizers. `lo`/`hi` are the
/// monotone transformed quantity at `t_cutoff` and `1`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Proposal {
    Uniform,
    /// `r ∝ d log var / dt`
    LogVar { lo: f64, hi: f64 },
    /// `r ∝ d var / dt`
    Var { lo: f64, hi: f64 },
    /// `r ∝ 1 - var` for linear beta; Gaussian-integral closed form.
    Erf {
        amp: f64,
        shift: f64,
        scale: f64,
        erf_lo: f64,
        erf_hi: f64,
    },
    /// `r ∝ d log(var / ring_var) / dt`
    LogVarRatio { lo: f64, hi: f64 },
    /// `r ∝ d log ring_var / dt`
    LogRingVar { lo: f64, hi: f64 },
}

/// A validated (schedule, mechanism, strategy) triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSampler {
    schedule: SdeSchedule,
    mechanism: WeightingMechanism,
    strategy: TSamplingStrategy,
    /// Schedule whose variance defines the proposal. Equal to `schedule`
    /// except for the sub-VPSDE, which borrows the linear VPSDE proposals.
    base: SdeSchedule,
    proposal: Proposal,
}

fn linear_twin(s: &SdeSchedule) -> Result<SdeSchedule> {
    ScheduleParams {
        kind: SdeKind::LinearVpsde,
        beta0: Some(s.beta0()),
        beta1: Some(s.beta1()),
        sigma2_min: None,
        sigma2_max: None,
        sigma2_0: Some(s.sigma2_0()),
        t_cutoff: Some(s.t_cutoff()),
    }
    .try_into()
}

impl TimeSampler {
    pub fn new(
        schedule: SdeSchedule,
        mechanism: WeightingMechanism,
        strategy: TSamplingStrategy,
    ) -> Result<Self> {
        use SdeKind::*;
        use WeightingMechanism::*;
        let base = if schedule.kind() == SubVpsde {
            linear_twin(&schedule)?
        } else {
            schedule
        };
        let eps = base.t_cutoff();
        let proposal = match strategy {
            TSamplingStrategy::Uniform => Proposal::Uniform,
            TSamplingStrategy::ImportanceSampled => match (base.kind(), mechanism) {
                // d log var/dt is constant: the optimal proposal is uniform.
                (GeometricVpsde, Wll) => Proposal::Uniform,
                (GeometricVpsde, Wun) => {
                    return Err(Error::config(
                        "sgm_strategy",
                        "importance sampling is not available for geometric_vpsde with wun; use uniform",
                    ))
                }
                (LinearVpsde, Wll) => Proposal::LogVar {
                    lo: base.var_raw(eps).ln(),
                    hi: base.var_raw(1.0).ln(),
                },
                (LinearVpsde | GeometricVpsde, Wre) => Proposal::Var {
                    lo: base.var_raw(eps),
                    hi: base.var_raw(1.0),
                },
                (LinearVpsde, Wun) => {
                    let d = base.beta1() - base.beta0();
                    let shift = base.beta0() / d;
                    let scale = (0.5 * d).sqrt();
                    // 1 - var = (1 - s0) exp(beta0^2 / 2d) exp(-(d/2)(t + shift)^2)
                    let amp = (1.0 - base.sigma2_0())
                        * (base.beta0() * base.beta0() / (2.0 * d)).exp()
                        * (PI / (2.0 * d)).sqrt();
                    Proposal::Erf {
                        amp,
                        shift,
                        scale,
                        erf_lo: erf(scale * (eps + shift)),
                        erf_hi: erf(scale * (1.0 + shift)),
                    }
                }
                // g^2/var is constant for the VESDE, so Wun shares the Wll proposal.
                (Vesde, Wll | Wun) => Proposal::LogVarRatio {
                    lo: (base.var_raw(eps) / base.ring_var_raw(eps)).ln(),
                    hi: (base.var_raw(1.0) / base.ring_var_raw(1.0)).ln(),
                },
                (Vesde, Wre) => Proposal::LogRingVar {
                    lo: base.ring_var_raw(eps).ln(),
                    hi: base.ring_var_raw(1.0).ln(),
                },
                (SubVpsde, _) => unreachable!("sub-VPSDE proposals resolve through the linear twin"),
            },
        };
        Ok(TimeSampler {
            schedule,
            mechanism,
            strategy,
            base,
            proposal,
        })
    }

    pub fn schedule(&self) -> &SdeSchedule {
        &self.schedule
    }
    pub fn mechanism(&self) -> WeightingMechanism {
        self.mechanism
    }
    pub fn strategy(&self) -> TSamplingStrategy {
        self.strategy
    }

    /// True when draws are uniform on `[t_cutoff, 1]`.
    pub fn is_uniform(&self) -> bool {
        self.proposal == Proposal::Uniform
    }

    fn eps(&self) -> f64 {
        self.schedule.t_cutoff()
    }

    fn check_t(&self, t: f64) -> Result<f64> {
        let t = self.schedule.check_t(t)?;
        if t < self.eps() - 1e-12 {
            return Err(Error::Domain(format!("time {t} below t_cutoff {}", self.eps())));
        }
        Ok(t.max(self.eps()))
    }

    /// Normalized proposal density `r(t)` on `[t_cutoff, 1]`.
    pub fn pdf(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        Ok(self.pdf_raw(t))
    }

    fn pdf_raw(&self, t: f64) -> f64 {
        let b = &self.base;
        match self.proposal {
            Proposal::Uniform => 1.0 / (1.0 - self.eps()),
            Proposal::LogVar { lo, hi } => b.dvar_dt_raw(t) / b.var_raw(t) / (hi - lo),
            Proposal::Var { lo, hi } => b.dvar_dt_raw(t) / (hi - lo),
            Proposal::Erf {
                amp, erf_lo, erf_hi, ..
            } => {
                let one_minus_var = (1.0 - b.sigma2_0()) * (-b.integrated_beta(t)).exp();
                one_minus_var / (amp * (erf_hi - erf_lo))
            }
            Proposal::LogVarRatio { lo, hi } => {
                (b.dvar_dt_raw(t) / b.var_raw(t) - b.dring_var_dt_raw(t) / b.ring_var_raw(t))
                    / (hi - lo)
            }
            Proposal::LogRingVar { lo, hi } => {
                b.dring_var_dt_raw(t) / b.ring_var_raw(t) / (hi - lo)
            }
        }
    }

    /// Proposal CDF `R(t)`.
    pub fn cdf(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        let b = &self.base;
        let v = match self.proposal {
            Proposal::Uniform => (t - self.eps()) / (1.0 - self.eps()),
            Proposal::LogVar { lo, hi } => (b.var_raw(t).ln() - lo) / (hi - lo),
            Proposal::Var { lo, hi } => (b.var_raw(t) - lo) / (hi - lo),
            Proposal::Erf {
                shift,
                scale,
                erf_lo,
                erf_hi,
                ..
            } => (erf(scale * (t + shift)) - erf_lo) / (erf_hi - erf_lo),
            Proposal::LogVarRatio { lo, hi } => {
                ((b.var_raw(t) / b.ring_var_raw(t)).ln() - lo) / (hi - lo)
            }
            Proposal::LogRingVar { lo, hi } => (b.ring_var_raw(t).ln() - lo) / (hi - lo),
        };
        Ok(v.clamp(0.0, 1.0))
    }

    /// Inverse CDF.
    pub fn quantile(&self, rho: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Domain(format!("rho {rho} outside [0, 1]")));
        }
        let eps = self.eps();
        if rho == 0.0 {
            return Ok(eps);
        }
        if rho == 1.0 {
            return Ok(1.0);
        }
        let b = &self.base;
        let t = match self.proposal {
            Proposal::Uniform => eps + rho * (1.0 - eps),
            // Geometric interpolation in log space: var_eps^{1-rho} var_1^rho.
            Proposal::LogVar { lo, hi } => b.inverse_var((lo + rho * (hi - lo)).exp())?,
            Proposal::Var { lo, hi } => b.inverse_var((1.0 - rho) * lo + rho * hi)?,
            Proposal::Erf {
                shift,
                scale,
                erf_lo,
                erf_hi,
                ..
            } => erfinv(erf_lo + rho * (erf_hi - erf_lo)) / scale - shift,
            Proposal::LogVarRatio { lo, hi } => {
                // var / ring_var = (c + x) / (a + x), x = sigma2_min k^t.
                let u = (lo + rho * (hi - lo)).exp();
                let a = 1.0 - b.sigma2_min();
                let c = b.sigma2_0() - b.sigma2_min();
                let x = (u * a - c) / (1.0 - u);
                b.inverse_ring_var(a + x)?
            }
            Proposal::LogRingVar { lo, hi } => b.inverse_ring_var((lo + rho * (hi - lo)).exp())?,
        };
        Ok(t.clamp(eps, 1.0))
    }

    /// Maps a uniform variate to a draw.
    pub fn sample_t(&self, rho: f64) -> Result<TDraw> {
        let t = self.quantile(rho)?;
        let is_weight = if self.is_uniform() {
            1.0 - self.eps()
        } else {
            1.0 / self.pdf_raw(t)
        };
        Ok(TDraw {
            t,
            is_weight,
            obj_weight: self.mechanism.weight(&self.schedule, t)?,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TDraw> {
        self.sample_t(rng.random::<f64>())
    }

    /// `is_weight * w_target(t) / 2`: per-draw factor multiplying the
    /// denoising loss so its expectation is `(1/2) ∫ w_target(t) E||.||^2 dt`.
    pub fn combined_weight(&self, draw: &TDraw, target: WeightingMechanism) -> Result<f64> {
        let w = if target == self.mechanism {
            draw.obj_weight
        } else {
            target.weight(&self.schedule, draw.t)?
        };
        Ok(draw.is_weight * w / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use WeightingMechanism::*;

    fn linear() -> SdeSchedule {
        SdeSchedule::linear_vpsde(0.1, 20.0, 0.0, None).unwrap()
    }

    fn is(s: SdeSchedule, m: WeightingMechanism) -> TimeSampler {
        TimeSampler::new(s, m, TSamplingStrategy::ImportanceSampled).unwrap()
    }

    pub(crate) fn supported() -> Vec<TimeSampler> {
        let schedules = [
            linear(),
            SdeSchedule::linear_vpsde(0.1, 20.0, 1e-4, None).unwrap(),
            SdeSchedule::geometric_vpsde(3e-5, 0.999, None).unwrap(),
            SdeSchedule::vesde(1e-4, 100.0, None).unwrap(),
            SdeSchedule::sub_vpsde(0.1, 20.0, 0.0, None).unwrap(),
        ];
        let mut out = vec![];
        for s in schedules {
            for m in WeightingMechanism::ALL {
                for st in [TSamplingStrategy::Uniform, TSamplingStrategy::ImportanceSampled] {
                    if let Ok(ts) = TimeSampler::new(s, m, st) {
                        out.push(ts);
                    }
                }
            }
        }
        out
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + h * i as f64);
        }
        acc * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        for ts in supported() {
            let eps = ts.schedule().t_cutoff();
            let total = simpson(|t| ts.pdf(t).unwrap(), eps, 1.0, 10_000);
            assert!((total - 1.0).abs() < 1e-6, "{:?} {:?} {:?}: {total}", ts.schedule().kind(), ts.mechanism(), ts.strategy());
        }
    }

    #[test]
    fn cdf_matches_integrated_pdf() {
        for ts in supported() {
            let eps = ts.schedule().t_cutoff();
            for t in [0.05, 0.3, 0.7] {
                // Split near t_cutoff where the log-variance proposals are sharply peaked.
                let mut q = 0.0;
                let mut a = eps;
                for b in [eps + 1e-3, eps + 1e-2, t] {
                    q += simpson(|s| ts.pdf(s).unwrap(), a, b, 4000);
                    a = b;
                }
                let c = ts.cdf(t).unwrap();
                assert!((c - q).abs() < 1e-6, "{:?} {:?} {:?} t={t}: {c} vs {q}", ts.schedule().kind(), ts.mechanism(), ts.strategy());
            }
        }
    }

    #[test]
    fn quantile_endpoints_and_round_trip() {
        for ts in supported() {
            assert_eq!(ts.quantile(0.0).unwrap(), ts.schedule().t_cutoff());
            assert_eq!(ts.quantile(1.0).unwrap(), 1.0);
            for i in 1..50 {
                let rho = i as f64 / 50.0;
                let t = ts.quantile(rho).unwrap();
                assert!((ts.cdf(t).unwrap() - rho).abs() < 1e-9, "{:?} {:?}", ts.schedule().kind(), ts.mechanism());
            }
        }
    }

    #[test]
    fn reweighted_median_draw() {
        let d = is(linear(), Wre).sample_t(0.5).unwrap();
        assert!((d.t - 0.259_331_525_1).abs() < 1e-8, "{}", d.t);
    }

    #[test]
    fn likelihood_proposal_tilts_towards_zero() {
        let ts = is(linear(), Wll);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let t = 0.01 + 0.99 * i as f64 / 100.0;
            let p = ts.pdf(t).unwrap();
            assert!(p < prev);
            prev = p;
        }
        let d = ts.sample_t(0.5).unwrap();
        assert!((d.t - 0.062_909_661_4).abs() < 1e-8, "{}", d.t);
    }

    #[test]
    fn reweighted_cdf_closed_form() {
        let s = linear();
        let ts = is(s, Wre);
        let lo = s.kernel(0.01).unwrap().var;
        let hi = s.kernel(1.0).unwrap().var;
        for t in [0.02, 0.4, 0.9, 1.0] {
            let want = (s.kernel(t).unwrap().var - lo) / (hi - lo);
            assert!((ts.cdf(t).unwrap() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn geometric_unweighted_is_rejected() {
        let s = SdeSchedule::geometric_vpsde(3e-5, 0.999, None).unwrap();
        let err = TimeSampler::new(s, Wun, TSamplingStrategy::ImportanceSampled).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(TimeSampler::new(s, Wun, TSamplingStrategy::Uniform).is_ok());
        assert!(is(s, Wll).is_uniform());
    }

    #[test]
    fn likelihood_combined_weight_is_paper_prefactor() {
        let s = linear();
        let ts = is(s, Wll);
        let l = s.kernel(1.0).unwrap().var.ln() - s.kernel(0.01).unwrap().var.ln();
        for rho in [0.1, 0.5, 0.9] {
            let d = ts.sample_t(rho).unwrap();
            let var = s.kernel(d.t).unwrap().var;
            let want = l / (2.0 * (1.0 - var));
            let got = ts.combined_weight(&d, Wll).unwrap();
            assert!((got / want - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn reweighted_draws_reweighted_to_likelihood() {
        let s = linear();
        let ts = is(s, Wre);
        let lo = s.kernel(0.01).unwrap().var;
        let hi = s.kernel(1.0).unwrap().var;
        for rho in [0.2, 0.6] {
            let d = ts.sample_t(rho).unwrap();
            let v = s.kernel(d.t).unwrap().var;
            let want = (hi - lo) / (2.0 * v * (1.0 - v));
            assert!((ts.combined_weight(&d, Wll).unwrap() / want - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_weight() {
        let s = linear();
        let ts = TimeSampler::new(s, Wun, TSamplingStrategy::Uniform).unwrap();
        let d = ts.sample_t(0.3).unwrap();
        assert!((ts.combined_weight(&d, Wun).unwrap() - 0.99 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn importance_weights_are_unbiased_for_t_squared() {
        let n = 200_000;
        for ts in supported() {
            let eps = ts.schedule().t_cutoff();
            let exact = (1.0 - eps.powi(3)) / 3.0;
            let mut rng = stream(11, Purpose::Diagnostic, 0);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let d = ts.draw(&mut rng).unwrap();
                let v = d.is_weight * d.t * d.t;
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - exact).abs() < 4.0 * se + 1e-12, "{:?} {:?}: {mean} vs {exact} (se {se})", ts.schedule().kind(), ts.mechanism());
        }
    }

    #[test]
    fn rho_out_of_range() {
        assert!(is(linear(), Wll).sample_t(1.5).is_err());
    }
}
