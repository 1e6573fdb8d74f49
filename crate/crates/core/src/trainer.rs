//! Training loops: VAE pretraining under a standard-Normal prior, then
//! joint training of the VAE and the score-based prior with one of three
//! update schemes.
//!
//! * Alg1: a single `t ~ r_ll` batch drives every parameter with `w_ll`.
//! * Alg2: the prior is trained on its own `t` draws with its mechanism;
//!   encoder and decoder get a fresh `t ~ r_ll` batch with `w_ll`.
//! * Alg3: one shared `t` batch from the prior's proposal; the prior sees
//!   its mechanism's weight and the encoder the `w_ll` reweighting.

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::PathBuf;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, Grads, Parameterized, Tensor};
use crate::objectives::{ce_const, DsmPass, LossBreakdown, VaePass};
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::schedule::SdeSchedule;
use crate::score_prior::{MixedScoreNet, ScoreNetSpec};
use crate::time_sampling::{TSamplingStrategy, TimeSampler, WeightingMechanism};
use crate::vae::{VaeBackbone, VaeSpec};

/// Time sampling for the encoder's objective when the prior uses another
/// weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QObjT {
    /// Reuse the prior's `t` batch and reweight (Alg3).
    Rew,
    /// Draw a separate `t ~ r_ll` batch (Alg2).
    SeparateLl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Alg1,
    Alg2,
    Alg3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: SdeSchedule,
    pub mechanism: WeightingMechanism,
    pub sgm_strategy: TSamplingStrategy,
    pub q_obj_t: QObjT,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_prior: f64,
    pub epochs_pretrain: usize,
    pub epochs_main: usize,
    pub kl_beta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Forces an update scheme; by default Alg1 for `wll`, else from `q_obj_t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    /// Keeps the pretrained encoder and decoder fixed in the main phase, so
    /// only the prior trains (two-stage training).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub freeze_vae: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (name, lr) in [("lr_vae", self.lr_vae), ("lr_prior", self.lr_prior)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(name, format!("must be a positive number, got {lr}")));
            }
        }
        if !(self.kl_beta > 0.0 && self.kl_beta <= 1.0) {
            return Err(Error::config("kl_beta", format!("must lie in (0, 1], got {}", self.kl_beta)));
        }
        if self.algorithm == Some(Algorithm::Alg1) && self.mechanism != WeightingMechanism::Wll {
            return Err(Error::config("algorithm", "alg1 trains every parameter with wll"));
        }
        TimeSampler::new(self.schedule, self.mechanism, self.sgm_strategy)?;
        Ok(())
    }

    pub fn algorithm(&self) -> Algorithm {
        match (self.algorithm, self.mechanism, self.q_obj_t) {
            (Some(a), _, _) => a,
            (None, WeightingMechanism::Wll, _) => Algorithm::Alg1,
            (None, _, QObjT::SeparateLl) => Algorithm::Alg2,
            (None, _, QObjT::Rew) => Algorithm::Alg3,
        }
    }

    pub fn prior_sampler(&self) -> Result<TimeSampler> {
        TimeSampler::new(self.schedule, self.mechanism, self.sgm_strategy)
    }

    /// Proposal for the encoder's `w_ll` objective.
    pub fn ll_sampler(&self) -> Result<TimeSampler> {
        TimeSampler::new(self.schedule, WeightingMechanism::Wll, TSamplingStrategy::ImportanceSampled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vae: VaeSpec,
    #[serde(default)]
    pub prior: ScoreNetSpec,
}

/// Independent streams for one step.
pub struct StepRngs {
    pub encoder: rand_chacha::ChaCha8Rng,
    pub vae_time: rand_chacha::ChaCha8Rng,
    pub vae_noise: rand_chacha::ChaCha8Rng,
    pub prior_time: rand_chacha::ChaCha8Rng,
    pub prior_noise: rand_chacha::ChaCha8Rng,
}

impl StepRngs {
    pub fn new(seed: u64, step: u64) -> Self {
        StepRngs {
            encoder: stream(seed, Purpose::EncoderNoise, step),
            vae_time: stream(seed, Purpose::VaeTime, step),
            vae_noise: stream(seed, Purpose::VaeNoise, step),
            prior_time: stream(seed, Purpose::PriorTime, step),
            prior_noise: stream(seed, Purpose::PriorNoise, step),
        }
    }
}

/// Gradients of one update, before any optimizer step.
#[derive(Debug, Clone)]
pub struct StepGrads<F = f32> {
    /// Over `[encoder..., decoder...]`.
    pub vae: Grads<F>,
    /// Over `[alpha_logits, eps_net...]`; `None` while pretraining.
    pub prior: Option<Grads<F>>,
    pub loss: LossBreakdown,
    /// Weighted denoising loss seen by the prior, without the constant.
    pub prior_loss: f64,
    /// Number of prior forward passes on diffused latents.
    pub dsm_evals: u64,
}

impl<F: Real> StepGrads<F> {
    pub fn norm(&self) -> f64 {
        (self.vae.sq_norm() + self.prior.as_ref().map_or(0.0, |g| g.sq_norm())).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.prior_loss.is_finite()
            && self.vae.is_finite()
            && self.prior.as_ref().is_none_or(|g| g.is_finite())
    }
}

/// VAE objective `recon + kl_weight * KL(q || N(0, I))`.
pub fn grads_pretrain<F: Real>(
    vae: &VaeBackbone<F>,
    x: &Tensor<F>,
    kl_weight: f64,
    rngs: &mut StepRngs,
) -> Result<StepGrads<F>> {
    let pass = VaePass::run(vae, x, &mut rngs.encoder)?;
    let kl = pass.standard_kl()?;
    let kl_mean = kl.iter().sum::<f64>() / kl.len() as f64;
    let vae_g = pass.backward(vae, None, 0.0, kl_weight)?;
    // Under N(0, I) the cross-entropy is KL minus the negative entropy.
    let ne = pass.mean_neg_entropy();
    Ok(StepGrads {
        vae: vae_g,
        prior: None,
        loss: LossBreakdown::new(pass.mean_recon(), ne, kl_mean - ne, 0.0),
        prior_loss: 0.0,
        dsm_evals: 0,
    })
}

fn ll_breakdown<F: Real>(pass: &VaePass<F>, dsm: &DsmPass<F>, w_ll: &[f64], schedule: &SdeSchedule) -> LossBreakdown {
    let c = ce_const(schedule, pass.z0.cols());
    LossBreakdown::new(pass.mean_recon(), pass.mean_neg_entropy(), dsm.weighted_mean(w_ll) + c, c)
}

/// One `t ~ r_ll` batch; every parameter follows the `w_ll` objective.
pub fn grads_alg1<F: Real>(
    vae: &VaeBackbone<F>,
    prior: &MixedScoreNet<F>,
    ll_sampler: &TimeSampler,
    x: &Tensor<F>,
    rngs: &mut StepRngs,
) -> Result<StepGrads<F>> {
    let pass = VaePass::run(vae, x, &mut rngs.encoder)?;
    let dsm = DsmPass::run(prior, ll_sampler, &pass.z0, &mut rngs.vae_time, &mut rngs.vae_noise)?;
    let w = dsm.weights(ll_sampler, WeightingMechanism::Wll)?;
    let (g_prior, dz0) = dsm.backward(prior, &w)?;
    let vae_g = pass.backward(vae, Some(&dz0), 1.0, 0.0)?;
    Ok(StepGrads {
        vae: vae_g,
        prior: Some(g_prior),
        loss: ll_breakdown(&pass, &dsm, &w, ll_sampler.schedule()),
        prior_loss: dsm.weighted_mean(&w),
        dsm_evals: 1,
    })
}

/// Prior on its own draws; encoder and decoder on a fresh `t ~ r_ll` batch.
pub fn grads_alg2<F: Real>(
    vae: &VaeBackbone<F>,
    prior: &MixedScoreNet<F>,
    prior_sampler: &TimeSampler,
    ll_sampler: &TimeSampler,
    x: &Tensor<F>,
    rngs: &mut StepRngs,
) -> Result<StepGrads<F>> {
    let pass = VaePass::run(vae, x, &mut rngs.encoder)?;
    // Prior update: z0 is treated as data, so only the parameter gradient is kept.
    let p_dsm = DsmPass::run(prior, prior_sampler, &pass.z0, &mut rngs.prior_time, &mut rngs.prior_noise)?;
    let w_p = p_dsm.weights(prior_sampler, prior_sampler.mechanism())?;
    let (g_prior, _) = p_dsm.backward(prior, &w_p)?;
    let q_dsm = DsmPass::run(prior, ll_sampler, &pass.z0, &mut rngs.vae_time, &mut rngs.vae_noise)?;
    let w_q = q_dsm.weights(ll_sampler, WeightingMechanism::Wll)?;
    let (_, dz0) = q_dsm.backward(prior, &w_q)?;
    let vae_g = pass.backward(vae, Some(&dz0), 1.0, 0.0)?;
    Ok(StepGrads {
        vae: vae_g,
        prior: Some(g_prior),
        loss: ll_breakdown(&pass, &q_dsm, &w_q, ll_sampler.schedule()),
        prior_loss: p_dsm.weighted_mean(&w_p),
        dsm_evals: 2,
    })
}

/// One shared `t` batch from the prior's proposal, weighted twice.
pub fn grads_alg3<F: Real>(
    vae: &VaeBackbone<F>,
    prior: &MixedScoreNet<F>,
    prior_sampler: &TimeSampler,
    x: &Tensor<F>,
    rngs: &mut StepRngs,
) -> Result<StepGrads<F>> {
    let pass = VaePass::run(vae, x, &mut rngs.encoder)?;
    let dsm = DsmPass::run(prior, prior_sampler, &pass.z0, &mut rngs.prior_time, &mut rngs.prior_noise)?;
    let w_p = dsm.weights(prior_sampler, prior_sampler.mechanism())?;
    let w_q = dsm.weights(prior_sampler, WeightingMechanism::Wll)?;
    let (g_prior, _) = dsm.backward(prior, &w_p)?;
    let (_, dz0) = dsm.backward(prior, &w_q)?;
    let vae_g = pass.backward(vae, Some(&dz0), 1.0, 0.0)?;
    Ok(StepGrads {
        vae: vae_g,
        prior: Some(g_prior),
        loss: ll_breakdown(&pass, &dsm, &w_q, prior_sampler.schedule()),
        prior_loss: dsm.weighted_mean(&w_p),
        dsm_evals: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

/// One JSON-lines metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub phase: Phase,
    pub nelbo: f64,
    pub recon: f64,
    pub ce: f64,
    pub alpha_max: f64,
    pub grad_norm: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub prior_loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: ModelSpec,
    pub vae: VaeBackbone<f32>,
    pub prior: MixedScoreNet<f32>,
    opt_vae: Adam<f32>,
    opt_prior: Adam<f32>,
    pub phase: Phase,
    /// Steps taken in the current phase.
    pub phase_step: u64,
    /// Steps taken overall.
    pub step: u64,
    pub dsm_evals: u64,
    /// Where to write state when a non-finite loss aborts training.
    pub dump_dir: Option<PathBuf>,
    /// Metrics callback cadence in steps.
    pub log_every: u64,
    prior_sampler: TimeSampler,
    ll_sampler: TimeSampler,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, models: ModelSpec) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Purpose::Init, 0);
        let vae = VaeBackbone::init(&models.vae, &mut rng)?;
        let prior = MixedScoreNet::init(models.vae.latent_dim, &models.prior, &mut rng)?;
        Self::from_parts(cfg, models, vae, prior)
    }

    fn from_parts(cfg: TrainConfig, models: ModelSpec, vae: VaeBackbone<f32>, prior: MixedScoreNet<f32>) -> Result<Self> {
        let opt_vae = Adam::new(AdamConfig::new(cfg.lr_vae), &vae.param_slices());
        let opt_prior = Adam::new(AdamConfig::new(cfg.lr_prior), &prior.param_slices());
        Ok(Trainer {
            prior_sampler: cfg.prior_sampler()?,
            ll_sampler: cfg.ll_sampler()?,
            cfg,
            models,
            vae,
            prior,
            opt_vae,
            opt_prior,
            phase: Phase::Pretrain,
            phase_step: 0,
            step: 0,
            dsm_evals: 0,
            dump_dir: None,
            log_every: 50,
            started: Instant::now(),
        })
    }

    pub fn prior_sampler(&self) -> &TimeSampler {
        &self.prior_sampler
    }

    pub fn ll_sampler(&self) -> &TimeSampler {
        &self.ll_sampler
    }

    /// Switches to joint training with a fresh VAE optimizer.
    pub fn begin_main(&mut self) {
        if self.phase == Phase::Main {
            return;
        }
        self.phase = Phase::Main;
        self.phase_step = 0;
        self.opt_vae = Adam::new(AdamConfig::new(self.cfg.lr_vae), &self.vae.param_slices());
    }

    /// KL weight at `phase_step`: linear from 0 to `kl_beta` over the first
    /// 30% of pretraining.
    pub fn kl_weight(&self, total_steps: u64) -> f64 {
        let warm = (0.3 * total_steps as f64).max(1.0);
        self.cfg.kl_beta * ((self.phase_step + 1) as f64 / warm).min(1.0)
    }

    /// Gradients the next step would apply to `x`, without applying them.
    pub fn compute_grads(&self, x: &Tensor<f32>, algorithm: Algorithm, rngs: &mut StepRngs) -> Result<StepGrads<f32>> {
        match algorithm {
            // Validation pins Alg1 to wll, so the prior's proposal is r_ll
            // under the configured strategy.
            Algorithm::Alg1 => grads_alg1(&self.vae, &self.prior, &self.prior_sampler, x, rngs),
            Algorithm::Alg2 => grads_alg2(&self.vae, &self.prior, &self.prior_sampler, &self.ll_sampler, x, rngs),
            Algorithm::Alg3 => grads_alg3(&self.vae, &self.prior, &self.prior_sampler, x, rngs),
        }
    }

    fn apply(&mut self, g: StepGrads<f32>) -> Result<StepOutput> {
        if !g.is_finite() {
            return Err(self.abort(&g));
        }
        let out = StepOutput {
            loss: g.loss,
            prior_loss: g.prior_loss,
            grad_norm: g.norm(),
        };
        if !(self.cfg.freeze_vae && self.phase == Phase::Main) {
            self.opt_vae.step(self.vae.param_slices_mut(), &g.vae)?;
        }
        if let Some(gp) = &g.prior {
            self.opt_prior.step(self.prior.param_slices_mut(), gp)?;
        }
        self.dsm_evals += g.dsm_evals;
        self.step += 1;
        self.phase_step += 1;
        Ok(out)
    }

    fn abort(&self, g: &StepGrads<f32>) -> Error {
        let msg = format!(
            "step {} ({:?}): nelbo {}, prior loss {}, grad norm {}",
            self.step,
            self.phase,
            g.loss.nelbo,
            g.prior_loss,
            g.norm()
        );
        self.dump(
            &msg,
            json!({
                "loss": g.loss,
                "prior_loss": g.prior_loss,
                "vae_grad_finite": g.vae.is_finite(),
                "prior_grad_finite": g.prior.as_ref().map(|p| p.is_finite()),
            }),
        )
    }

    /// Writes the diagnostic dump (if enabled) and builds the abort error.
    fn dump(&self, msg: &str, detail: serde_json::Value) -> Error {
        if let Some(dir) = &self.dump_dir {
            let dump = json!({
                "step": self.step,
                "phase": self.phase,
                "message": msg,
                "detail": detail,
                "alpha": self.prior.alpha(),
            });
            let res = std::fs::create_dir_all(dir)
                .map_err(Error::from)
                .and_then(|_| {
                    let body = serde_json::to_vec_pretty(&dump)?;
                    Ok(std::fs::write(dir.join(format!("nan_dump_step{}.json", self.step)), body)?)
                })
                .and_then(|_| self.checkpoint().save(&dir.join(format!("nan_dump_step{}.ldlb", self.step))));
            if let Err(e) = res {
                warn!("failed to write NaN dump: {e}");
            }
        }
        Error::NonFinite(msg.to_string())
    }

    fn guarded(&self, g: Result<StepGrads<f32>>) -> Result<StepGrads<f32>> {
        match g {
            Err(Error::NonFinite(m)) => Err(self.dump(&format!("step {}: {m}", self.step), serde_json::Value::Null)),
            other => other,
        }
    }

    pub fn pretrain_step(&mut self, x: &Tensor<f32>, kl_weight: f64) -> Result<StepOutput> {
        let mut rngs = StepRngs::new(self.cfg.seed, self.step);
        let g = self.guarded(grads_pretrain(&self.vae, x, kl_weight, &mut rngs))?;
        self.apply(g)
    }

    pub fn train_step_with(&mut self, x: &Tensor<f32>, algorithm: Algorithm) -> Result<StepOutput> {
        let mut rngs = StepRngs::new(self.cfg.seed, self.step);
        let g = self.guarded(self.compute_grads(x, algorithm, &mut rngs))?;
        self.apply(g)
    }

    pub fn train_step(&mut self, x: &Tensor<f32>) -> Result<StepOutput> {
        self.train_step_with(x, self.cfg.algorithm())
    }

    pub fn train_step_alg1(&mut self, x: &Tensor<f32>) -> Result<StepOutput> {
        self.train_step_with(x, Algorithm::Alg1)
    }

    pub fn train_step_alg2(&mut self, x: &Tensor<f32>) -> Result<StepOutput> {
        self.train_step_with(x, Algorithm::Alg2)
    }

    pub fn train_step_alg3(&mut self, x: &Tensor<f32>) -> Result<StepOutput> {
        self.train_step_with(x, Algorithm::Alg3)
    }

    fn metrics(&self, out: &StepOutput) -> Metrics {
        Metrics {
            step: self.step,
            phase: self.phase,
            nelbo: out.loss.nelbo,
            recon: out.loss.recon,
            ce: out.loss.cross_entropy,
            alpha_max: self.prior.alpha_max(),
            grad_norm: out.grad_norm,
            wallclock: self.started.elapsed().as_secs_f64(),
        }
    }

    fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        (data.len() / self.cfg.batch_size).max(1) as u64
    }

    /// Runs (or resumes) a phase for `total` steps over `data`.
    fn run_phase(&mut self, data: &Dataset, total: u64, on_metrics: &mut dyn FnMut(&Metrics)) -> Result<()> {
        let per_epoch = self.steps_per_epoch(data);
        let mut cached: Option<(u64, Vec<Tensor<f32>>)> = None;
        while self.phase_step < total {
            let epoch = self.phase_step / per_epoch;
            if cached.as_ref().is_none_or(|c| c.0 != epoch) {
                // Epoch streams are disjoint between phases.
                let key = epoch + if self.phase == Phase::Main { 1 << 32 } else { 0 };
                cached = Some((epoch, data.batches(key, self.cfg.batch_size, self.cfg.seed)?));
            }
            let x = &cached.as_ref().expect("filled").1[(self.phase_step % per_epoch) as usize];
            let out = match self.phase {
                Phase::Pretrain => {
                    let w = self.kl_weight(total);
                    self.pretrain_step(x, w)?
                }
                Phase::Main => self.train_step(x)?,
            };
            if self.phase_step.is_multiple_of(self.log_every) || self.phase_step == total {
                on_metrics(&self.metrics(&out));
            }
        }
        Ok(())
    }

    pub fn run_pretrain(&mut self, data: &Dataset, on_metrics: &mut dyn FnMut(&Metrics)) -> Result<()> {
        if self.phase != Phase::Pretrain {
            return Ok(());
        }
        let total = self.cfg.epochs_pretrain as u64 * self.steps_per_epoch(data);
        info!("pretraining for {total} steps");
        self.run_phase(data, total, on_metrics)
    }

    pub fn run_main(&mut self, data: &Dataset, on_metrics: &mut dyn FnMut(&Metrics)) -> Result<()> {
        self.begin_main();
        let total = self.cfg.epochs_main as u64 * self.steps_per_epoch(data);
        info!("joint training ({:?}) for {total} steps", self.cfg.algorithm());
        self.run_phase(data, total, on_metrics)
    }

    /// Monte-Carlo NELBO of the current models over `data`, averaged over
    /// `reps` posterior and `t` draws per datapoint.
    pub fn estimate_nelbo(&self, data: &Dataset, reps: usize, seed: u64) -> Result<LossBreakdown> {
        estimate_nelbo(&self.vae, &self.prior, &self.ll_sampler, data, reps, seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = json!({
            "kind": "ldlb-trainer",
            "config": self.cfg,
            "models": self.models,
            "phase": self.phase,
            "phase_step": self.phase_step,
            "step": self.step,
            "dsm_evals": self.dsm_evals,
            "adam_vae_step": self.opt_vae.step,
            "adam_prior_step": self.opt_prior.step,
        });
        let mut ck = Checkpoint::new(meta);
        self.vae.save_params("vae", &mut ck);
        self.prior.save_params("prior", &mut ck);
        for (name, opt) in [("adam_vae", &self.opt_vae), ("adam_prior", &self.opt_prior)] {
            for (k, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                ck.push(format!("{name}.m.{k}"), m.clone());
                ck.push(format!("{name}.v.{k}"), v.clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta["kind"] != "ldlb-trainer" {
            return Err(Error::Format("checkpoint is not a trainer state".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")));
        let cfg: TrainConfig = serde_json::from_value(field("config")?)?;
        let models: ModelSpec = serde_json::from_value(field("models")?)?;
        let mut t = Trainer::new(cfg, models)?;
        t.phase = serde_json::from_value(field("phase")?)?;
        t.phase_step = serde_json::from_value(field("phase_step")?)?;
        t.step = serde_json::from_value(field("step")?)?;
        t.dsm_evals = serde_json::from_value(field("dsm_evals")?)?;
        t.opt_vae.step = serde_json::from_value(field("adam_vae_step")?)?;
        t.opt_prior.step = serde_json::from_value(field("adam_prior_step")?)?;
        let mut r = ck.reader();
        t.vae.load_params("vae", &mut r)?;
        t.prior.load_params("prior", &mut r)?;
        for (name, opt) in [("adam_vae", &mut t.opt_vae), ("adam_prior", &mut t.opt_prior)] {
            for k in 0..opt.m.len() {
                let n = opt.m[k].len();
                opt.m[k].copy_from_slice(r.take(&format!("{name}.m.{k}"), n)?);
                opt.v[k].copy_from_slice(r.take(&format!("{name}.v.{k}"), n)?);
            }
        }
        r.finish()?;
        Ok(t)
    }
}

/// Monte-Carlo NELBO over `data` with the `w_ll` importance-sampled
/// cross-entropy estimator.
pub fn estimate_nelbo<F: Real>(
    vae: &VaeBackbone<F>,
    prior: &MixedScoreNet<F>,
    ll_sampler: &TimeSampler,
    data: &Dataset,
    reps: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let x: Tensor<F> = data.epoch_data(0).cast();
    let c = ce_const(ll_sampler.schedule(), vae.latent_dim());
    let (mut recon, mut ne, mut ce) = (0.0, 0.0, 0.0);
    for r in 0..reps.max(1) as u64 {
        let pass = VaePass::run(vae, &x, &mut stream(seed, Purpose::EncoderNoise, r))?;
        let dsm = DsmPass::run(
            prior,
            ll_sampler,
            &pass.z0,
            &mut stream(seed, Purpose::VaeTime, r),
            &mut stream(seed, Purpose::VaeNoise, r),
        )?;
        recon += pass.mean_recon();
        ne += pass.mean_neg_entropy();
        ce += dsm.weighted_mean(&dsm.weights(ll_sampler, WeightingMechanism::Wll)?) + c;
    }
    let n = reps.max(1) as f64;
    Ok(LossBreakdown::new(recon / n, ne / n, ce / n, c))
}
