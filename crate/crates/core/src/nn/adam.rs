use serde::{Deserialize, Serialize};

use super::Grads;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta_m")]
    pub beta_m: f64,
    #[serde(default = "default_beta_v")]
    pub beta_v: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta_m() -> f64 {
    0.9
}
fn default_beta_v() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta_m: default_beta_m(),
            beta_v: default_beta_v(),
            eps: default_eps(),
        }
    }
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F = f32> {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &[&[F]]) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update; moments are tracked in `f64` precision of
    /// the element type `F`.
    pub fn step(&mut self, params: Vec<&mut [F]>, grads: &Grads<F>) -> Result<()> {
        if params.len() != grads.bufs.len() || params.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), grads.bufs.len()));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc_m = 1.0 - c.beta_m.powi(self.step as i32);
        let bc_v = 1.0 - c.beta_v.powi(self.step as i32);
        let (bm, bv) = (F::of(c.beta_m), F::of(c.beta_v));
        let (one_m, one_v) = (F::of(1.0 - c.beta_m), F::of(1.0 - c.beta_v));
        let step_size = F::of(c.lr / bc_m);
        let inv_sqrt_bc_v = F::of(1.0 / bc_v.sqrt());
        let eps = F::of(c.eps);
        for (k, p) in params.into_iter().enumerate() {
            let g = &grads.bufs[k];
            if p.len() != g.len() {
                return Err(Error::shape(p.len(), g.len()));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = bm * m[i] + one_m * g[i];
                v[i] = bv * v[i] + one_v * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc_v + eps);
            }
        }
        Ok(())
    }
}
