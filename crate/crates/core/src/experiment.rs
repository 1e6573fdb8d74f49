//! Experiment configuration and the pipeline pieces shared by the CLI and the
//! end-to-end checks: data loading, sampling with decoding, and the toy
//! end-to-end versus Normal-prior comparison.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::data::{gen_toy_split, load_mnist_idx, mode_coverage, Dataset, DatasetKind, ModeCoverage, TOY_STD};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::nn::Tensor;
use crate::objectives::normal_prior_nelbo;
use crate::rng::{stream, Purpose};
use crate::samplers::{ancestral_sample, eval_nelbo, ode_sample, prior_draws, NelboReport, OdeSolverConfig, OdeStats};
use crate::schedule::SdeSchedule;
use crate::score_prior::{MixedScoreNet, ScoreNetSpec};
use crate::time_sampling::{TSamplingStrategy, WeightingMechanism};
use crate::trainer::{Metrics, ModelSpec, QObjT, TrainConfig, Trainer};
use crate::vae::{DecoderKind, VaeBackbone, VaeSpec};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Toy training-set size.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    /// Toy held-out size, or a cap on the MNIST test split.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Directory holding the MNIST IDX files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Optional cap on the MNIST training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

fn default_n_train() -> usize {
    4096
}
fn default_n_eval() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ode,
    Ancestral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Hutchinson probes per datapoint; 0 means the exact trace.
    #[serde(default = "default_probes")]
    pub n_probes: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default = "default_ancestral_steps")]
    pub ancestral_steps: usize,
}

fn default_probes() -> usize {
    16
}
fn default_n_samples() -> usize {
    1000
}
fn default_sampler() -> SamplerKind {
    SamplerKind::Ode
}
fn default_ancestral_steps() -> usize {
    1000
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_probes: default_probes(),
            n_samples: default_n_samples(),
            sampler: default_sampler(),
            ancestral_steps: default_ancestral_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataConfig,
    pub train: TrainConfig,
    pub models: ModelSpec,
    #[serde(default)]
    pub solver: OdeSolverConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Master seed; overrides `train.seed`.
    pub seed: u64,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::config(format!("{prefix}.{field}"), message),
        other => other,
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for a 2-D toy set.
    pub fn toy(kind: DatasetKind) -> Self {
        ExperimentConfig {
            dataset: DataConfig {
                kind,
                n_train: default_n_train(),
                n_eval: default_n_eval(),
                path: None,
                limit: None,
            },
            train: TrainConfig {
                schedule: SdeSchedule::linear_vpsde(0.1, 20.0, 0.0, None).expect("valid"),
                mechanism: WeightingMechanism::Wun,
                sgm_strategy: TSamplingStrategy::ImportanceSampled,
                q_obj_t: QObjT::SeparateLl,
                batch_size: 128,
                lr_vae: 2e-3,
                lr_prior: 2e-3,
                epochs_pretrain: 60,
                epochs_main: 60,
                kl_beta: 1.0,
                seed: 0,
                algorithm: None,
                freeze_vae: false,
            },
            models: ModelSpec {
                vae: VaeSpec {
                    data_dim: 2,
                    latent_dim: 2,
                    hidden: vec![64, 64],
                    activation: Activation::Swish,
                    decoder: DecoderKind::Gaussian,
                },
                prior: ScoreNetSpec {
                    hidden: vec![64, 64],
                    activation: Activation::Swish,
                    time_embed_dim: 16,
                },
            },
            solver: OdeSolverConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }

    /// Small-VAE defaults for dynamically binarized MNIST under `dir`.
    pub fn mnist(dir: &Path) -> Self {
        let mut c = Self::toy(DatasetKind::MnistBinarized);
        c.dataset.path = Some(dir.to_path_buf());
        c.dataset.n_eval = 10_000;
        c.train.batch_size = 100;
        c.train.lr_vae = 1e-3;
        c.train.lr_prior = 3e-4;
        c.train.epochs_pretrain = 100;
        c.train.epochs_main = 100;
        c.train.kl_beta = 0.7;
        c.models.vae = VaeSpec {
            data_dim: 784,
            latent_dim: 32,
            hidden: vec![512, 256],
            activation: Activation::Swish,
            decoder: DecoderKind::Bernoulli,
        };
        c.models.prior = ScoreNetSpec {
            hidden: vec![256, 256],
            activation: Activation::Swish,
            time_embed_dim: 32,
        };
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.solver.validate(&self.train.schedule).map_err(|e| prefixed("solver", e))?;
        let vae = &self.models.vae;
        if vae.latent_dim == 0 {
            return Err(Error::config("models.vae.latent_dim", "must be positive"));
        }
        match self.dataset.kind {
            DatasetKind::MnistBinarized => {
                let dir = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("dataset.path", "mnist-binarized needs the IDX directory"))?;
                for f in [MNIST_TRAIN_IMAGES, MNIST_TEST_IMAGES] {
                    if !dir.join(f).is_file() {
                        return Err(Error::config("dataset.path", format!("missing {}", dir.join(f).display())));
                    }
                }
                if vae.data_dim != 784 {
                    return Err(Error::config("models.vae.data_dim", "MNIST images have 784 pixels"));
                }
                if vae.decoder != DecoderKind::Bernoulli {
                    return Err(Error::config("models.vae.decoder", "binarized pixels need the bernoulli decoder"));
                }
            }
            _ => {
                if vae.data_dim != 2 {
                    return Err(Error::config("models.vae.data_dim", "toy points are 2-D"));
                }
                if self.dataset.n_train == 0 || self.dataset.n_eval == 0 {
                    return Err(Error::config("dataset.n_train", "toy sets need n_train, n_eval > 0"));
                }
            }
        }
        if self.eval.n_samples == 0 {
            return Err(Error::config("eval.n_samples", "must be positive"));
        }
        if self.eval.ancestral_steps == 0 {
            return Err(Error::config("eval.ancestral_steps", "must be positive"));
        }
        Ok(())
    }

    /// Training and held-out sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::MnistBinarized => {
                let dir = d.path.as_ref().ok_or_else(|| Error::config("dataset.path", "missing"))?;
                let mut train = load_mnist_idx(&dir.join(MNIST_TRAIN_IMAGES), self.seed)?;
                if let Some(n) = d.limit {
                    train = train.head(n);
                }
                let test = load_mnist_idx(&dir.join(MNIST_TEST_IMAGES), self.seed ^ 1)?;
                Ok((train, test.head(d.n_eval)))
            }
            kind => Ok((
                gen_toy_split(kind, d.n_train, self.seed, 0)?,
                gen_toy_split(kind, d.n_eval, self.seed, 1)?,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub latents: Tensor<f64>,
    /// Decoder means (pixel probabilities for Bernoulli).
    pub x: Tensor<f64>,
    /// ODE work counters; `None` for ancestral sampling.
    pub stats: Option<OdeStats>,
}

/// Draws `n` prior samples and decodes them.
pub fn sample_decoded(
    vae: &VaeBackbone<f32>,
    prior: &MixedScoreNet<f32>,
    schedule: &SdeSchedule,
    n: usize,
    eval: &EvalConfig,
    solver: &OdeSolverConfig,
    seed: u64,
) -> Result<Decoded> {
    let z1 = prior_draws(schedule, n, vae.latent_dim(), &mut stream(seed, Purpose::Sampling, 0));
    let (latents, stats) = match eval.sampler {
        SamplerKind::Ode => {
            let r = ode_sample(prior, schedule, &z1, solver)?;
            (r.z0, Some(r.stats))
        }
        SamplerKind::Ancestral => {
            let t_end = solver.t_end_for(schedule);
            let mut rng = stream(seed, Purpose::Sampling, 1);
            (ancestral_sample(prior, schedule, &z1, eval.ancestral_steps, t_end, &mut rng)?, None)
        }
    };
    let x = vae.cast::<f64>().decode_mean(&latents)?;
    Ok(Decoded { latents, x, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyComparison {
    /// N(0, I)-prior VAE trained for the pretraining plus joint step budget.
    pub baseline_nelbo: f64,
    /// The pretrained VAE under its N(0, I) prior, before joint training.
    pub pretrained_nelbo: f64,
    /// Two-stage training: the pretrained VAE frozen, only the prior trained.
    pub two_stage: NelboReport,
    pub lsgm: NelboReport,
    pub coverage: ModeCoverage,
    pub nfe: usize,
}

impl ToyComparison {
    pub fn improvement(&self) -> f64 {
        self.baseline_nelbo - self.lsgm.nelbo
    }
}

/// Trains a latent score model end to end and compares its held-out NELBO
/// with a Normal-prior VAE given the same number of updates and with
/// two-stage training of the prior on the frozen pretrained VAE, then checks
/// mode coverage of decoded samples.
pub fn toy_end_to_end(cfg: &ExperimentConfig, on_metrics: &mut dyn FnMut(&Metrics)) -> Result<ToyComparison> {
    cfg.validate()?;
    let (train, held_out) = cfg.load_data()?;
    let eval_seed = cfg.seed ^ 0xe7a1;

    let mut base_cfg = cfg.train.clone();
    base_cfg.epochs_pretrain += base_cfg.epochs_main;
    let mut baseline = Trainer::new(base_cfg, cfg.models.clone())?;
    baseline.run_pretrain(&train, &mut |_| {})?;
    let baseline_nelbo = normal_prior_nelbo(&baseline.vae.cast::<f64>(), &held_out, 8, eval_seed)?.nelbo;

    let mut t = Trainer::new(cfg.train.clone(), cfg.models.clone())?;
    t.run_pretrain(&train, on_metrics)?;
    let pretrained_nelbo = normal_prior_nelbo(&t.vae.cast::<f64>(), &held_out, 8, eval_seed)?.nelbo;

    let mut frozen = Trainer::from_checkpoint(&t.checkpoint())?;
    frozen.cfg.freeze_vae = true;
    frozen.run_main(&train, &mut |_| {})?;
    let two_stage = eval_nelbo(&frozen.vae, &frozen.prior, &cfg.train.schedule, &held_out, &cfg.solver, cfg.eval.n_probes, eval_seed)?;

    t.run_main(&train, on_metrics)?;
    let lsgm = eval_nelbo(&t.vae, &t.prior, &cfg.train.schedule, &held_out, &cfg.solver, cfg.eval.n_probes, eval_seed)?;

    let s = sample_decoded(&t.vae, &t.prior, &cfg.train.schedule, cfg.eval.n_samples, &cfg.eval, &cfg.solver, eval_seed)?;
    let coverage = mode_coverage(&s.x, 3.0 * TOY_STD)?;
    Ok(ToyComparison {
        baseline_nelbo,
        pretrained_nelbo,
        two_stage,
        lsgm,
        coverage,
        nfe: s.stats.map_or(0, |s| s.nfe),
    })
}
