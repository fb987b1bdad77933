//! Short-run Langevin samplers and the importance-weighted posterior.
//!
//! The policy is sampled by running a fixed, small number of noisy gradient
//! steps from a broad initialization; this is an approximate sampler by
//! design, and training compensates by always comparing posterior and prior
//! expectations estimated with the same machinery. Every per-step update
//! (gradient move plus injected noise, combined) is norm-clipped, which is
//! what keeps early training stable when energy gradients are still wild.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    energy_grads, transition_logprob, transition_logprob_action_grad, transition_mean, Context,
    Dynamics, EnergyPolicyModel, TransitionEnsemble,
};
use crate::vecmath;

/// Weight-normalization tolerance: weights must sum to one within this.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Sampler configuration.
///
/// The step size decays polynomially from `step_init` to `step_final` over
/// `n_steps`; with `inference_double` set, the chain then keeps running for
/// another `n_steps` at `step_final`, which buys extra mixing when sampling
/// from a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinConfig {
    /// Number of scheduled steps (K).
    pub n_steps: usize,
    /// Step size at the start of the schedule.
    pub step_init: f64,
    /// Step size at the end of the schedule.
    pub step_final: f64,
    /// Multiplier on the injected noise; 0 gives deterministic ascent.
    pub noise_scale: f64,
    /// Cap on the Euclidean norm of each realized per-step update.
    pub clip_norm: f64,
    /// Run K extra steps at `step_final`.
    pub inference_double: bool,
    /// Population size drawn by callers that sample in batches.
    pub n_samples: usize,
}

/// Training-time sampler settings for the curve task.
impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            n_steps: 20,
            step_init: 1.0,
            step_final: 1.0,
            noise_scale: 0.5,
            clip_norm: 0.5,
            inference_double: false,
            n_samples: 4,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::config("sampler needs at least one step"));
        }
        if !(self.step_final > 0.0) || !(self.step_init >= self.step_final) {
            return Err(Error::config("step sizes must satisfy step_init >= step_final > 0"));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::config("noise scale must be non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip norm must be positive"));
        }
        if self.n_samples < 1 {
            return Err(Error::config("sample count must be at least 1"));
        }
        Ok(())
    }

    /// Total number of steps a chain runs under this config.
    pub fn total_steps(&self) -> usize {
        if self.inference_double {
            2 * self.n_steps
        } else {
            self.n_steps
        }
    }
}

/// Step size at step `k`: quadratic decay from `step_init` to `step_final`
/// over the scheduled steps, then flat at `step_final` for the doubled tail.
/// A single-step schedule is constant at `step_init`.
pub fn step_size(cfg: &LangevinConfig, k: usize) -> Result<f64> {
    if k >= cfg.total_steps() {
        return Err(Error::config(format!(
            "step index {k} outside schedule of {} steps",
            cfg.total_steps()
        )));
    }
    if k >= cfg.n_steps {
        return Ok(cfg.step_final);
    }
    if cfg.n_steps == 1 {
        return Ok(cfg.step_init);
    }
    let frac = 1.0 - k as f64 / (cfg.n_steps - 1) as f64;
    Ok(cfg.step_final + (cfg.step_init - cfg.step_final) * frac * frac)
}

/// Runs one Langevin chain and returns every iterate, the initial point
/// included. The update at step `k` is
/// `s(k) * grad + noise_scale * sqrt(2 s(k)) * eps`, clipped as a whole to
/// `clip_norm`.
///
/// Errors if the gradient turns non-finite, naming the step.
pub fn langevin_chain_iterates<F>(
    mut grad_fn: F,
    init: &[f64],
    cfg: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    let total = cfg.total_steps();
    let mut iterates = Vec::with_capacity(total + 1);
    let mut point = init.to_vec();
    iterates.push(point.clone());
    for k in 0..total {
        let grad = grad_fn(&point);
        debug_assert_eq!(grad.len(), point.len(), "gradient dim mismatch");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("sampler gradient at step {k}")));
        }
        let s = step_size(cfg, k)?;
        let noise_mag = cfg.noise_scale * (2.0 * s).sqrt();
        let mut delta: Vec<f64> = grad.iter().map(|g| s * g).collect();
        for d in delta.iter_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            *d += noise_mag * eps;
        }
        vecmath::clip_norm(&mut delta, cfg.clip_norm);
        for (p, d) in point.iter_mut().zip(&delta) {
            *p += d;
        }
        iterates.push(point.clone());
    }
    Ok(iterates)
}

/// Runs one Langevin chain and returns the final point.
pub fn langevin_chain<F>(
    grad_fn: F,
    init: &[f64],
    cfg: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    Ok(langevin_chain_iterates(grad_fn, init, cfg, rng)?.pop().unwrap())
}

/// Draws `n` actions from the policy in `ctx` by running independent chains
/// on the energy gradient, each initialized uniformly in `[-1, 1]^dim`.
pub fn sample_prior(
    policy: &EnergyPolicyModel,
    ctx: &Context,
    cfg: &LangevinConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if n < 1 {
        return Err(Error::config("prior sample count must be at least 1"));
    }
    cfg.validate()?;
    let dim = policy.action_dim;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let init: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad_fn = |a: &[f64]| energy_grads(policy, ctx, a).0;
        samples.push(langevin_chain(grad_fn, &init, cfg, rng)?);
    }
    Ok(samples)
}

/// Draws one posterior action by Langevin on the energy plus the one-step
/// lookahead log-density of the observed next state. The lookahead is taken
/// from the most recent context state.
pub fn sample_posterior_mcmc<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    ctx: &Context,
    s_next: &[f64],
    cfg: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let state = ctx.current().to_vec();
    let dim = policy.action_dim;
    let init: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_fn = |a: &[f64]| {
        let mut g = energy_grads(policy, ctx, a).0;
        let tg = transition_logprob_action_grad(dynamics, &state, a, s_next);
        vecmath::add_scaled(&mut g, 1.0, &tg);
        g
    };
    langevin_chain(grad_fn, &init, cfg, rng)
}

/// Prior samples with their self-normalized posterior weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedActions {
    pub actions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedActions {
    pub fn new(actions: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if actions.len() != weights.len() {
            return Err(Error::config("action and weight counts disagree"));
        }
        if actions.is_empty() {
            return Err(Error::empty("weighted action set"));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::config("weights must lie in [0, 1]"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::config(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightedActions { actions, weights })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Max-stabilized softmax of log-weights.
///
/// Errors on an empty slice, on NaN/+inf entries, and when every entry is
/// `-inf` (no sample explains the observation at all).
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::empty("log-weight set"));
    }
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::non_finite("importance log-weights"));
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::config("all log-weights are -inf"));
    }
    let mut weights: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(weights)
}

/// Posterior over the action behind an observed transition, represented by
/// `n` prior samples weighted by the transition likelihood of `s_next` and
/// self-normalized. The same sample set serves as the prior population, so
/// downstream contrastive estimates cancel exactly in directions where the
/// integrand is constant.
pub fn importance_posterior<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    ctx: &Context,
    s_next: &[f64],
    cfg: &LangevinConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WeightedActions> {
    if n < 2 {
        return Err(Error::config("importance posterior needs at least 2 samples"));
    }
    let actions = sample_prior(policy, ctx, cfg, n, rng)?;
    let state = ctx.current();
    let log_w: Vec<f64> =
        actions.iter().map(|a| transition_logprob(dynamics, state, a, s_next)).collect();
    if log_w.iter().all(|w| *w == f64::NEG_INFINITY) {
        let min_residual = actions
            .iter()
            .map(|a| vecmath::dist_stable(&transition_mean(dynamics, state, a), s_next))
            .fold(f64::INFINITY, f64::min);
        return Err(Error::UnexplainableTransition { min_residual });
    }
    let weights = normalize_log_weights(&log_w)?;
    WeightedActions::new(actions, weights)
}

/// Keeps the `ceil(keep_fraction * n)` candidates on which the two ensemble
/// members agree most (stable ascending sort by disagreement at the current
/// context state). `keep_fraction == 1` returns the input unchanged.
pub fn filter_by_disagreement(
    ens: &TransitionEnsemble,
    ctx: &Context,
    candidates: Vec<Vec<f64>>,
    keep_fraction: f64,
) -> Result<Vec<Vec<f64>>> {
    if candidates.is_empty() {
        return Err(Error::empty("candidate action set"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config("keep fraction must lie in (0, 1]"));
    }
    let n = candidates.len();
    let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return Ok(candidates);
    }
    let state = ctx.current();
    let mut scored: Vec<(f64, Vec<f64>)> = candidates
        .into_iter()
        .map(|a| (crate::model::ensemble_disagreement(ens, state, &a), a))
        .collect();
    scored.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("disagreement is finite"));
    Ok(scored.into_iter().take(keep).map(|(_, a)| a).collect())
}
