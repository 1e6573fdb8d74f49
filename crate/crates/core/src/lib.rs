//! Latent score-based generative modelling at desk scale.
//!
//! A VAE backbone whose prior is a score-based diffusion model in latent
//! space, trained end to end with variance-reduced denoising objectives and
//! evaluated through the probability-flow ODE.

pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod objectives;
pub mod real;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod score_prior;
pub mod special;
pub mod time_sampling;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use real::Real;
pub use schedule::{KernelParams, SdeKind, SdeSchedule};
pub use time_sampling::{TDraw, TSamplingStrategy, TimeSampler, WeightingMechanism};
