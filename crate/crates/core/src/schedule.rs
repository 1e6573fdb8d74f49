//! Diffusion SDE families `dz = f(t) z dt + g(t) dw` and their closed-form
//! Normal transition kernels.
//!
//! All schedule math runs in `f64`; exp/log cancellation near `t = 0` and
//! `t = 1` is handled with `expm1`/`ln_1p` where it matters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Slack for time queries that land just outside `[0, 1]` through rounding.
const T_CLAMP_SLACK: f64 = 1e-12;
const BISECTION_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeKind {
    LinearVpsde,
    GeometricVpsde,
    Vesde,
    SubVpsde,
}

impl SdeKind {
    pub fn is_vp_family(self) -> bool {
        !matches!(self, SdeKind::Vesde)
    }

    pub fn name(self) -> &'static str {
        match self {
            SdeKind::LinearVpsde => "linear_vpsde",
            SdeKind::GeometricVpsde => "geometric_vpsde",
            SdeKind::Vesde => "vesde",
            SdeKind::SubVpsde => "sub_vpsde",
        }
    }
}

/// Parameters of the transition kernel `q(z_t | z_0) = N(m(t) z_0, var I)`,
/// plus the variance `ring_var` reached by diffusing standard-Normal data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub mean_coeff: f64,
    pub var: f64,
    pub ring_var: f64,
}

impl KernelParams {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// Serialized form of a schedule; validated into [`SdeSchedule`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub kind: SdeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_cutoff: Option<f64>,
}

/// A validated diffusion schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct SdeSchedule {
    kind: SdeKind,
    beta0: f64,
    beta1: f64,
    sigma2_min: f64,
    sigma2_max: f64,
    sigma2_0: f64,
    t_cutoff: f64,
}

fn require(field: &str, v: Option<f64>, kind: SdeKind) -> Result<f64> {
    v.ok_or_else(|| Error::config(field, format!("required for {}", kind.name())))
}

fn positive_finite(field: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be finite and > 0, got {v}")))
    }
}

impl TryFrom<ScheduleParams> for SdeSchedule {
    type Error = Error;

    fn try_from(p: ScheduleParams) -> Result<Self> {
        let kind = p.kind;
        let mut s = SdeSchedule {
            kind,
            beta0: 0.0,
            beta1: 0.0,
            sigma2_min: 0.0,
            sigma2_max: 0.0,
            sigma2_0: 0.0,
            t_cutoff: 0.0,
        };
        match kind {
            SdeKind::LinearVpsde | SdeKind::SubVpsde => {
                s.beta0 = positive_finite("schedule.beta0", require("schedule.beta0", p.beta0, kind)?)?;
                s.beta1 = positive_finite("schedule.beta1", require("schedule.beta1", p.beta1, kind)?)?;
                if s.beta0 >= s.beta1 {
                    return Err(Error::config("schedule.beta1", "must exceed beta0"));
                }
                for (field, v) in [("schedule.sigma2_min", p.sigma2_min), ("schedule.sigma2_max", p.sigma2_max)] {
                    if v.is_some() {
                        return Err(Error::config(field, format!("not used by {}", kind.name())));
                    }
                }
                let s0 = p.sigma2_0.unwrap_or(0.0);
                if !(0.0..1.0).contains(&s0) {
                    return Err(Error::config("schedule.sigma2_0", "must lie in [0, 1)"));
                }
                s.sigma2_0 = s0;
                s.t_cutoff = p.t_cutoff.unwrap_or(if s0 == 0.0 { 0.01 } else { 0.0 });
            }
            SdeKind::GeometricVpsde | SdeKind::Vesde => {
                s.sigma2_min = positive_finite(
                    "schedule.sigma2_min",
                    require("schedule.sigma2_min", p.sigma2_min, kind)?,
                )?;
                s.sigma2_max = positive_finite(
                    "schedule.sigma2_max",
                    require("schedule.sigma2_max", p.sigma2_max, kind)?,
                )?;
                if s.sigma2_min >= s.sigma2_max {
                    return Err(Error::config("schedule.sigma2_max", "must exceed sigma2_min"));
                }
                if kind == SdeKind::GeometricVpsde && s.sigma2_max >= 1.0 {
                    return Err(Error::config("schedule.sigma2_max", "geometric VPSDE needs sigma2_max < 1"));
                }
                if s.sigma2_min >= 1.0 {
                    return Err(Error::config("schedule.sigma2_min", "must be < 1"));
                }
                for (field, v) in [("schedule.beta0", p.beta0), ("schedule.beta1", p.beta1)] {
                    if v.is_some() {
                        return Err(Error::config(field, format!("not used by {}", kind.name())));
                    }
                }
                if let Some(s0) = p.sigma2_0 {
                    if (s0 - s.sigma2_min).abs() > 1e-15 * s.sigma2_min.max(1.0) {
                        return Err(Error::config(
                            "schedule.sigma2_0",
                            "must equal sigma2_min for geometric VPSDE and VESDE",
                        ));
                    }
                }
                s.sigma2_0 = s.sigma2_min;
                s.t_cutoff = p.t_cutoff.unwrap_or(0.0);
            }
        }
        if !(0.0..1.0).contains(&s.t_cutoff) {
            return Err(Error::config("schedule.t_cutoff", "must lie in [0, 1)"));
        }
        if s.sigma2_0 == 0.0 && s.t_cutoff <= 0.0 {
            return Err(Error::config(
                "schedule.t_cutoff",
                "must be > 0 when sigma2_0 = 0 (the kernel is degenerate at t = 0)",
            ));
        }
        if kind == SdeKind::SubVpsde && s.sigma2_0 > 0.0 {
            // var'(t) = beta e^{-B} (2 (1 - e^{-B}) - sigma2_0) is negative until
            // 2 (1 - e^{-B}) reaches sigma2_0; require monotonicity on [t_cutoff, 1].
            let b = s.integrated_beta(s.t_cutoff);
            if 2.0 * (-(-b).exp_m1()) < s.sigma2_0 {
                return Err(Error::config(
                    "schedule.t_cutoff",
                    "sub-VPSDE variance is not increasing from t_cutoff for this sigma2_0",
                ));
            }
        }
        Ok(s)
    }
}

impl From<SdeSchedule> for ScheduleParams {
    fn from(s: SdeSchedule) -> Self {
        match s.kind {
            SdeKind::LinearVpsde | SdeKind::SubVpsde => ScheduleParams {
                kind: s.kind,
                beta0: Some(s.beta0),
                beta1: Some(s.beta1),
                sigma2_min: None,
                sigma2_max: None,
                sigma2_0: Some(s.sigma2_0),
                t_cutoff: Some(s.t_cutoff),
            },
            SdeKind::GeometricVpsde | SdeKind::Vesde => ScheduleParams {
                kind: s.kind,
                beta0: None,
                beta1: None,
                sigma2_min: Some(s.sigma2_min),
                sigma2_max: Some(s.sigma2_max),
                sigma2_0: Some(s.sigma2_0),
                t_cutoff: Some(s.t_cutoff),
            },
        }
    }
}

impl SdeSchedule {
    pub fn linear_vpsde(beta0: f64, beta1: f64, sigma2_0: f64, t_cutoff: Option<f64>) -> Result<Self> {
        ScheduleParams {
            kind: SdeKind::LinearVpsde,
            beta0: Some(beta0),
            beta1: Some(beta1),
            sigma2_min: None,
            sigma2_max: None,
            sigma2_0: Some(sigma2_0),
            t_cutoff,
        }
        .try_into()
    }

    pub fn sub_vpsde(beta0: f64, beta1: f64, sigma2_0: f64, t_cutoff: Option<f64>) -> Result<Self> {
        ScheduleParams {
            kind: SdeKind::SubVpsde,
            beta0: Some(beta0),
            beta1: Some(beta1),
            sigma2_min: None,
            sigma2_max: None,
            sigma2_0: Some(sigma2_0),
            t_cutoff,
        }
        .try_into()
    }

    pub fn geometric_vpsde(sigma2_min: f64, sigma2_max: f64, t_cutoff: Option<f64>) -> Result<Self> {
        ScheduleParams {
            kind: SdeKind::GeometricVpsde,
            beta0: None,
            beta1: None,
            sigma2_min: Some(sigma2_min),
            sigma2_max: Some(sigma2_max),
            sigma2_0: None,
            t_cutoff,
        }
        .try_into()
    }

    pub fn vesde(sigma2_min: f64, sigma2_max: f64, t_cutoff: Option<f64>) -> Result<Self> {
        ScheduleParams {
            kind: SdeKind::Vesde,
            beta0: None,
            beta1: None,
            sigma2_min: Some(sigma2_min),
            sigma2_max: Some(sigma2_max),
            sigma2_0: None,
            t_cutoff,
        }
        .try_into()
    }

    pub fn kind(&self) -> SdeKind {
        self.kind
    }
    pub fn beta0(&self) -> f64 {
        self.beta0
    }
    pub fn beta1(&self) -> f64 {
        self.beta1
    }
    pub fn sigma2_min(&self) -> f64 {
        self.sigma2_min
    }
    pub fn sigma2_max(&self) -> f64 {
        self.sigma2_max
    }
    pub fn sigma2_0(&self) -> f64 {
        self.sigma2_0
    }
    pub fn t_cutoff(&self) -> f64 {
        self.t_cutoff
    }

    /// Same schedule with a different lower time bound.
    pub fn with_t_cutoff(&self, t_cutoff: f64) -> Result<Self> {
        let mut p = ScheduleParams::from(*self);
        p.t_cutoff = Some(t_cutoff);
        p.try_into()
    }

    /// Validates a time query, clamping rounding-level excursions.
    pub fn check_t(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || !(-T_CLAMP_SLACK..=1.0 + T_CLAMP_SLACK).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(t.clamp(0.0, 1.0))
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma2_max / self.sigma2_min).ln()
    }

    /// `B(t) = ∫_0^t beta(s) ds` for the linear-beta kinds.
    pub(crate) fn integrated_beta(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    fn linear_beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// `sigma2_min (sigma2_max / sigma2_min)^t`
    fn geometric_var(&self, t: f64) -> f64 {
        self.sigma2_min * (t * self.log_ratio()).exp()
    }

    /// Instantaneous rate: `beta(t)` for the VPSDE family, `g^2(t)` for the VESDE.
    pub fn beta(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        Ok(self.beta_raw(t))
    }

    fn beta_raw(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::LinearVpsde | SdeKind::SubVpsde => self.linear_beta(t),
            SdeKind::GeometricVpsde => {
                let v = self.geometric_var(t);
                v / (1.0 - v) * self.log_ratio()
            }
            SdeKind::Vesde => self.g2_raw(t),
        }
    }

    /// Drift coefficient `f(t)`.
    pub fn drift_coeff(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        Ok(self.drift_raw(t))
    }

    fn drift_raw(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Vesde => 0.0,
            _ => -0.5 * self.beta_raw(t),
        }
    }

    /// Squared diffusion coefficient `g^2(t)`.
    pub fn g2(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        Ok(self.g2_raw(t))
    }

    fn g2_raw(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::LinearVpsde | SdeKind::GeometricVpsde => self.beta_raw(t),
            SdeKind::SubVpsde => {
                let b = self.integrated_beta(t);
                self.linear_beta(t) * -(-2.0 * b).exp_m1()
            }
            SdeKind::Vesde => self.sigma2_min * self.log_ratio() * (t * self.log_ratio()).exp(),
        }
    }

    /// Closed-form transition kernel at `t`.
    pub fn kernel(&self, t: f64) -> Result<KernelParams> {
        let t = self.check_t(t)?;
        Ok(self.kernel_raw(t))
    }

    fn kernel_raw(&self, t: f64) -> KernelParams {
        match self.kind {
            SdeKind::LinearVpsde => {
                let b = self.integrated_beta(t);
                let decay = (-b).exp();
                KernelParams {
                    mean_coeff: (-0.5 * b).exp(),
                    var: -(-b).exp_m1() + self.sigma2_0 * decay,
                    ring_var: 1.0,
                }
            }
            SdeKind::GeometricVpsde => {
                let v = self.geometric_var(t);
                KernelParams {
                    mean_coeff: ((1.0 - v) / (1.0 - self.sigma2_min)).sqrt(),
                    var: v,
                    ring_var: 1.0,
                }
            }
            SdeKind::Vesde => {
                let grown = self.geometric_var(t);
                KernelParams {
                    mean_coeff: 1.0,
                    var: self.sigma2_0 - self.sigma2_min + grown,
                    ring_var: 1.0 - self.sigma2_min + grown,
                }
            }
            SdeKind::SubVpsde => {
                let b = self.integrated_beta(t);
                let decay = (-b).exp();
                let one_minus = -(-b).exp_m1();
                KernelParams {
                    mean_coeff: (-0.5 * b).exp(),
                    var: one_minus * one_minus + self.sigma2_0 * decay,
                    ring_var: one_minus * one_minus + decay,
                }
            }
        }
    }

    /// Kernel variance `sigma^2_t` (no domain check).
    pub(crate) fn var_raw(&self, t: f64) -> f64 {
        self.kernel_raw(t).var
    }

    pub(crate) fn ring_var_raw(&self, t: f64) -> f64 {
        self.kernel_raw(t).ring_var
    }

    /// `d sigma^2_t / dt`, analytic.
    pub fn dvar_dt(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        Ok(self.dvar_dt_raw(t))
    }

    pub(crate) fn dvar_dt_raw(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::LinearVpsde => {
                self.linear_beta(t) * (1.0 - self.sigma2_0) * (-self.integrated_beta(t)).exp()
            }
            SdeKind::GeometricVpsde | SdeKind::Vesde => self.geometric_var(t) * self.log_ratio(),
            SdeKind::SubVpsde => {
                let b = self.integrated_beta(t);
                self.linear_beta(t) * (-b).exp() * (2.0 * -(-b).exp_m1() - self.sigma2_0)
            }
        }
    }

    /// `d ring_var / dt`, analytic.
    pub fn dring_var_dt(&self, t: f64) -> Result<f64> {
        let t = self.check_t(t)?;
        Ok(self.dring_var_dt_raw(t))
    }

    pub(crate) fn dring_var_dt_raw(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::LinearVpsde | SdeKind::GeometricVpsde => 0.0,
            SdeKind::Vesde => self.geometric_var(t) * self.log_ratio(),
            SdeKind::SubVpsde => {
                let b = self.integrated_beta(t);
                self.linear_beta(t) * (-b).exp() * (2.0 * -(-b).exp_m1() - 1.0)
            }
        }
    }

    /// Kernel variance at the lower time bound.
    pub fn sigma2_eps(&self) -> f64 {
        self.var_raw(self.t_cutoff)
    }

    /// Variance of the reference Normal at `t = 1` (standard-Normal data diffused
    /// to the end of the process).
    pub fn prior_var(&self) -> f64 {
        self.ring_var_raw(1.0)
    }

    /// Inverts `sigma^2_t` on `[t_cutoff, 1]`.
    pub fn inverse_var(&self, v: f64) -> Result<f64> {
        let lo = self.var_raw(self.t_cutoff);
        let hi = self.var_raw(1.0);
        let slack = 1e-12 * hi.abs().max(1.0);
        if !v.is_finite() || v < lo - slack || v > hi + slack {
            return Err(Error::Domain(format!(
                "variance {v} outside [{lo}, {hi}] reachable on [t_cutoff, 1]"
            )));
        }
        let v = v.clamp(lo, hi);
        let t = match self.kind {
            SdeKind::LinearVpsde => {
                let b = (-self.sigma2_0).ln_1p() - (-v).ln_1p();
                let d = self.beta1 - self.beta0;
                2.0 * b / (self.beta0 + (self.beta0 * self.beta0 + 2.0 * d * b).sqrt())
            }
            SdeKind::GeometricVpsde => (v / self.sigma2_min).ln() / self.log_ratio(),
            SdeKind::Vesde => {
                ((v - self.sigma2_0 + self.sigma2_min) / self.sigma2_min).ln() / self.log_ratio()
            }
            SdeKind::SubVpsde => bisect(|t| self.var_raw(t), v, self.t_cutoff, 1.0),
        };
        Ok(t.clamp(self.t_cutoff, 1.0))
    }

    /// Inverts `ring_var` on `[t_cutoff, 1]`; only defined where it is
    /// strictly increasing (VESDE).
    pub fn inverse_ring_var(&self, v: f64) -> Result<f64> {
        match self.kind {
            SdeKind::Vesde => {
                let lo = self.ring_var_raw(self.t_cutoff);
                let hi = self.ring_var_raw(1.0);
                let slack = 1e-12 * hi;
                if !v.is_finite() || v < lo - slack || v > hi + slack {
                    return Err(Error::Domain(format!("ring variance {v} outside [{lo}, {hi}]")));
                }
                let v = v.clamp(lo, hi);
                let t = ((v - 1.0 + self.sigma2_min) / self.sigma2_min).ln() / self.log_ratio();
                Ok(t.clamp(self.t_cutoff, 1.0))
            }
            other => Err(Error::Domain(format!(
                "ring variance is not invertible for {}",
                other.name()
            ))),
        }
    }

    /// Draws `z_t = m(t) z0 + sigma_t eps`.
    pub fn sample_transition<F: Real>(&self, z0: &[F], t: f64, eps: &[F]) -> Result<Vec<F>> {
        if z0.len() != eps.len() {
            return Err(Error::shape(z0.len(), eps.len()));
        }
        let k = self.kernel(t)?;
        let m = F::of(k.mean_coeff);
        let s = F::of(k.std());
        Ok(z0.iter().zip(eps).map(|(&z, &e)| m * z + s * e).collect())
    }

    /// Euler-Maruyama for the forward SDE `dz = f(t) z dt + g(t) dw`, moving
    /// every entry of `z` from `t0` to `t1` in `n_steps` uniform steps.
    pub fn forward_em<R: rand::Rng + ?Sized>(
        &self,
        z: &mut [f64],
        t0: f64,
        t1: f64,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<()> {
        if n_steps == 0 || t1 < t0 {
            return Err(Error::config("n_steps", "need n_steps >= 1 and t1 >= t0"));
        }
        let grid: Vec<f64> = (0..=n_steps).map(|k| t0 + (t1 - t0) * k as f64 / n_steps as f64).collect();
        self.forward_em_grid(z, &grid, rng)
    }

    /// Euler-Maruyama over an arbitrary increasing time grid.
    pub fn forward_em_grid<R: rand::Rng + ?Sized>(&self, z: &mut [f64], grid: &[f64], rng: &mut R) -> Result<()> {
        use rand_distr::{Distribution, StandardNormal};
        if grid.len() < 2 || grid.windows(2).any(|w| w[1].is_nan() || w[1] < w[0]) {
            return Err(Error::config("grid", "need at least two increasing time points"));
        }
        for w in grid.windows(2) {
            let (t, h) = (w[0], w[1] - w[0]);
            let (f, g) = (self.drift_coeff(t)?, (self.g2(t)? * h).sqrt());
            for v in z.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += f * *v * h + g * e;
            }
        }
        Ok(())
    }

    /// `|ring_var - var - (1 - sigma2_0) m^2|`, zero for every kind.
    pub fn ring_var_identity_check(&self, t: f64) -> Result<f64> {
        let k = self.kernel(t)?;
        Ok((k.ring_var - k.var - (1.0 - self.sigma2_0) * k.mean_coeff * k.mean_coeff).abs())
    }
}

/// Bisection for an increasing function on `[lo, hi]`.
fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
