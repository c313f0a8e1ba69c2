//! Sampling from densities known up to a normalizing constant by solving
//! the reverse-diffusion forward-backward SDE with the Deep BSDE method.
//!
//! Two small tanh networks parameterize `Y₀` and `Z`. They are trained
//! through a differentiable Euler–Maruyama rollout so that `Y_N` matches
//! `log π(X_N)`; afterwards the terminal states `X_N` of fresh rollouts are
//! approximate samples of the target.

pub mod autodiff;
pub mod cli;
pub mod diagnostics;
pub mod engine;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod targets;

pub use engine::{rollout, train, Noise, RolloutBatch, RolloutConfig, TrainOptions, TrainOutcome};
pub use nn::{AdamState, MlpParams};
pub use sampler::{sample, ModelCheckpoint};
pub use schedule::{BetaSchedule, TimeGrid};
pub use targets::{CustomTarget, GaussianTarget, MixtureTarget, Target, TargetDescriptor};
