//! Latent-action modeling of state-only trajectories.
//!
//! Demonstrations arrive as state sequences with no action labels. This
//! crate fits a generative model over them: an energy-based policy over a
//! latent action conditioned on a window of past states, composed with a
//! Gaussian transition density. Actions are never observed; the policy is
//! trained by contrasting posterior and prior expectations, both estimated
//! with short-run Langevin samplers or importance weighting.
//!
//! Module map:
//!
//! - [`nn`]: dense networks, exact reverse-mode gradients, Adam/AdamW.
//! - [`model`]: energy policy, Gaussian transitions (learned, implanted,
//!   ensemble), trajectory log-joint, serialized bundles.
//! - [`sampling`]: Langevin chains, prior/posterior samplers, importance
//!   weights, ensemble disagreement filtering.
//! - [`training`]: demo segmentation, replay buffer, gradient estimators,
//!   the main fitting loop, and a behavior-cloning baseline.
//! - [`planning`]: policy execution and goal-conditioned planning through
//!   the learned dynamics.
//! - [`envs`]: the cubic-curve task (demos, metrics, references).
//! - [`oracle`]: exact tabular counterpart used to verify every estimator
//!   and identity by enumeration.
//! - [`cli`]: the subcommands behind the `lanmdp` binary.

pub mod cli;
pub mod envs;
pub mod error;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod planning;
pub mod rng;
pub mod sampling;
pub mod training;
pub(crate) mod vecmath;

pub use error::{Error, Result};
