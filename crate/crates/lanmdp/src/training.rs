//! Maximum-likelihood training from state-only demonstrations.
//!
//! The policy sees only states; the actions behind each demonstrated
//! transition are latent and integrated out by sampling. Each iteration
//! infers per-step action posteriors, takes a contrastive energy step, and
//! (when the transition model is learned) fits the dynamics on replayed
//! interaction mixed with demonstration transitions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    energy, energy_grads, transition_logprob, transition_logprob_grads, BundleSeeds, Context,
    EnergyPolicyModel, GaussianTransitionModel, ModelBundle, Transition, TransitionEnsemble,
};
use crate::nn::{self, MlpGrads, OptimState};
use crate::rng::{self, tag};
use crate::sampling::{
    filter_by_disagreement, normalize_log_weights, sample_posterior_mcmc, sample_prior,
    LangevinConfig,
};

pub const METRICS_HEADER: &str =
    "step,acceptance_rate,mean_residual,policy_loss,transition_nll,buffer_size";

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Minimal rollout interface. Environments are deterministic given the
/// reset draw; stochasticity in rollouts comes from the reset and the
/// action sampler.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

/// One training example: a context window and the next state it should
/// explain. The action in between stays latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSegment {
    pub context: Context,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub context_len: usize,
    pub state_dim: usize,
    pub segments: Vec<DemoSegment>,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Splits state-only trajectories into per-transition segments. Histories
/// shorter than the window are padded by repeating the first state.
pub fn segment_demos(demos: &[Vec<Vec<f64>>], context_len: usize) -> Result<DemoDataset> {
    if demos.is_empty() {
        return Err(Error::empty("demonstration set"));
    }
    if context_len == 0 {
        return Err(Error::config("context length must be at least 1"));
    }
    let state_dim = demos[0].first().map(|s| s.len()).unwrap_or(0);
    if state_dim == 0 {
        return Err(Error::config("demonstrations must contain non-empty states"));
    }
    let mut segments = Vec::new();
    for (i, demo) in demos.iter().enumerate() {
        if demo.len() < 2 {
            return Err(Error::config(format!(
                "demonstration {i} has {} states; need at least 2",
                demo.len()
            )));
        }
        if demo.iter().any(|s| s.len() != state_dim) {
            return Err(Error::config(format!("demonstration {i} mixes state dims")));
        }
        for t in 0..demo.len() - 1 {
            segments.push(DemoSegment {
                context: Context::from_history(&demo[..=t], context_len),
                next_state: demo[t + 1].clone(),
            });
        }
    }
    Ok(DemoDataset { context_len, state_dim, segments })
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

/// One observed environment transition with its executed action.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<TransitionSample>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer { items: Vec::new(), capacity, cursor: 0 })
    }

    pub fn push(&mut self, sample: TransitionSample) {
        if self.items.len() < self.capacity {
            self.items.push(sample);
        } else {
            self.items[self.cursor] = sample;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionSample> {
        self.items.iter()
    }

    /// Uniform minibatch with replacement; deterministic in the RNG state.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TransitionSample>> {
        if self.items.is_empty() {
            return Err(Error::empty("replay buffer"));
        }
        Ok((0..batch)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    /// Short-run chains on energy plus one-step lookahead.
    Mcmc,
    /// Prior samples reweighted by the transition likelihood.
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_transition: f64,
    /// Decoupled weight decay on the policy net; zero for plain Adam.
    pub weight_decay: f64,
    /// Mixing weight of the demonstration term in the transition update;
    /// the replay term gets the complement.
    pub w_beta: f64,
    /// Fraction of prior samples kept after ensemble-disagreement
    /// filtering; 1 disables filtering.
    pub keep_fraction: f64,
    pub posterior_mode: PosteriorMode,
    pub sampler: LangevinConfig,
    /// Collect on-policy rollouts every this many iterations.
    pub rollout_interval: u64,
    pub rollouts_per_collection: usize,
    /// Transitions gathered with the initial policy before pretraining.
    pub prefill_transitions: usize,
    pub pretrain_steps: u64,
    pub replay_capacity: usize,
    pub eval_interval: u64,
    /// Rollouts per evaluation point, consumed by the evaluator.
    pub eval_rollouts: usize,
    /// Langevin noise scale when acting for evaluation or deployment.
    pub eval_noise: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr_policy > 0.0) || !(self.lr_transition > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.w_beta) {
            return Err(Error::config("w_beta must lie in [0, 1]"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("keep fraction must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.rollout_interval == 0 {
            return Err(Error::config("rollout interval must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval interval must be positive"));
        }
        if !(self.eval_noise >= 0.0) {
            return Err(Error::config("eval noise must be non-negative"));
        }
        if self.replay_capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        self.sampler.validate()
    }
}

/// Training profile for the curve task.
pub fn curve_profile() -> TrainConfig {
    TrainConfig {
        iterations: 3000,
        batch_size: 64,
        lr_policy: 1e-4,
        lr_transition: 1e-3,
        weight_decay: 0.0,
        w_beta: 0.0,
        keep_fraction: 0.5,
        posterior_mode: PosteriorMode::Importance,
        sampler: LangevinConfig::default(),
        rollout_interval: 10,
        rollouts_per_collection: 1,
        prefill_transitions: 2000,
        pretrain_steps: 3000,
        replay_capacity: 10_000,
        eval_interval: 500,
        eval_rollouts: 20,
        eval_noise: 0.05,
        seed: 0,
    }
}

/// Missing config fields inherit the curve profile.
impl Default for TrainConfig {
    fn default() -> Self {
        curve_profile()
    }
}

/// Sampler settings for acting outside training: longer chains, tempered
/// noise.
pub fn inference_sampler(train: &LangevinConfig, noise_scale: f64) -> LangevinConfig {
    LangevinConfig { noise_scale, inference_double: true, ..train.clone() }
}

// ---------------------------------------------------------------------------
// Gradient estimators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyGradStats {
    /// Segments whose next state no sampled action could explain.
    pub skipped_segments: usize,
    /// Mean prior energy minus mean posterior energy; approaches zero as
    /// the prior absorbs the demonstrations.
    pub surrogate_loss: f64,
}

/// Minimizer-ready policy gradient over a segment batch: the negated
/// contrastive estimate (posterior-weighted energy gradients minus prior
/// ones) plus the optional squared-energy regularizer.
///
/// In importance mode one prior sample set per segment serves both sides,
/// after optional ensemble-disagreement filtering. In MCMC mode separate
/// posterior and prior chains are run.
pub fn policy_grad(
    policy: &EnergyPolicyModel,
    transition: &Transition,
    segments: &[&DemoSegment],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MlpGrads, PolicyGradStats)> {
    if segments.is_empty() {
        return Err(Error::empty("segment batch"));
    }
    let mut grads = MlpGrads::zeros_like(&policy.net);
    let mut skipped = 0usize;
    let mut surrogate = 0.0;
    let n = cfg.sampler.n_samples;

    for seg in segments {
        match cfg.posterior_mode {
            PosteriorMode::Importance => {
                let mut actions = sample_prior(policy, &seg.context, &cfg.sampler, n, rng)?;
                if cfg.keep_fraction < 1.0 {
                    if let Transition::Learned(ens) = transition {
                        actions =
                            filter_by_disagreement(ens, &seg.context, actions, cfg.keep_fraction)?;
                    }
                }
                let state = seg.context.current();
                let log_w: Vec<f64> = actions
                    .iter()
                    .map(|a| transition_logprob(transition, state, a, &seg.next_state))
                    .collect();
                if log_w.iter().all(|w| *w == f64::NEG_INFINITY) {
                    skipped += 1;
                    continue;
                }
                let weights = normalize_log_weights(&log_w)?;
                let m = actions.len() as f64;
                for (a, w) in actions.iter().zip(&weights) {
                    let (_, param_g) = energy_grads(policy, &seg.context, a);
                    let f = energy(policy, &seg.context, a);
                    // Ascent coefficient (w - 1/m) negated for the
                    // minimizer, plus d/df of l2 * f^2 / m.
                    let coef = -(w - 1.0 / m) + policy.l2_energy_coef * 2.0 * f / m;
                    grads.axpy(coef, &param_g);
                    surrogate += (1.0 / m - w) * f;
                }
            }
            PosteriorMode::Mcmc => {
                let m = n as f64;
                for _ in 0..n {
                    let a = sample_posterior_mcmc(
                        policy,
                        transition,
                        &seg.context,
                        &seg.next_state,
                        &cfg.sampler,
                        rng,
                    )?;
                    let (_, param_g) = energy_grads(policy, &seg.context, &a);
                    let f = energy(policy, &seg.context, &a);
                    grads.axpy(-1.0 / m + policy.l2_energy_coef * f / m, &param_g);
                    surrogate -= f / m;
                }
                let prior = sample_prior(policy, &seg.context, &cfg.sampler, n, rng)?;
                for a in &prior {
                    let (_, param_g) = energy_grads(policy, &seg.context, a);
                    let f = energy(policy, &seg.context, a);
                    grads.axpy(1.0 / m + policy.l2_energy_coef * f / m, &param_g);
                    surrogate += f / m;
                }
            }
        }
    }

    let used = segments.len() - skipped;
    if used > 0 {
        grads.scale(1.0 / used as f64);
        surrogate /= used as f64;
    } else {
        grads.scale(0.0);
        surrogate = 0.0;
    }
    if !grads.is_finite() || !surrogate.is_finite() {
        return Err(Error::non_finite("policy gradient"));
    }
    Ok((grads, PolicyGradStats { skipped_segments: skipped, surrogate_loss: surrogate }))
}

/// Minimizer-ready transition gradient: negative log-likelihood averaged
/// over a demonstration term (weight `w_beta`) and a replay term (weight
/// `1 - w_beta`). An empty source hands its weight to the other; both empty
/// is an error. Also returns the combined mean negative log-likelihood.
pub fn transition_grad(
    model: &GaussianTransitionModel,
    demo: &[TransitionSample],
    replay: &[TransitionSample],
    w_beta: f64,
) -> Result<(MlpGrads, f64)> {
    if demo.is_empty() && replay.is_empty() {
        return Err(Error::empty("transition batch"));
    }
    if !(0.0..=1.0).contains(&w_beta) {
        return Err(Error::config("w_beta must lie in [0, 1]"));
    }
    let (wd, wr) = match (demo.is_empty(), replay.is_empty()) {
        (true, false) => (0.0, 1.0),
        (false, true) => (1.0, 0.0),
        _ => (w_beta, 1.0 - w_beta),
    };

    let mut grads = MlpGrads::zeros_like(&model.net);
    let mut nll = 0.0;
    let mut accumulate = |set: &[TransitionSample], weight: f64| {
        if set.is_empty() || weight == 0.0 {
            return;
        }
        let scale = weight / set.len() as f64;
        for s in set {
            let (_, g) = transition_logprob_grads(model, &s.state, &s.action, &s.next_state);
            grads.axpy(-scale, &g);
            nll -= scale * transition_logprob(model, &s.state, &s.action, &s.next_state);
        }
    };
    accumulate(demo, wd);
    accumulate(replay, wr);
    if !grads.is_finite() {
        return Err(Error::non_finite("transition gradient"));
    }
    Ok((grads, nll))
}

// ---------------------------------------------------------------------------
// Rollouts and pretraining
// ---------------------------------------------------------------------------

/// Runs the policy in the environment, returning every transition taken.
/// One prior Langevin chain is spent per action.
pub fn collect_rollouts<E: Environment>(
    policy: &EnergyPolicyModel,
    env: &E,
    sampler: &LangevinConfig,
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TransitionSample>> {
    let mut out = Vec::with_capacity(n_rollouts * env.horizon());
    for _ in 0..n_rollouts {
        let mut history = vec![env.reset(rng)];
        for _ in 0..env.horizon() {
            let ctx = Context::from_history(&history, policy.context_len);
            let action = sample_prior(policy, &ctx, sampler, 1, rng)?.pop().unwrap();
            let state = history.last().unwrap().clone();
            let next_state = env.step(&state, &action);
            out.push(TransitionSample { state, action, next_state: next_state.clone() });
            history.push(next_state);
        }
    }
    Ok(out)
}

/// Fits every ensemble member on the buffer by independent Adam runs with
/// member-specific batch streams. Returns the final mean NLL per member.
pub fn pretrain_transition(
    ens: &mut TransitionEnsemble,
    buffer: &ReplayBuffer,
    steps: u64,
    lr: f64,
    batch_size: usize,
    master_seed: u64,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::empty("replay buffer"));
    }
    let mut final_nll = Vec::new();
    for (m, member) in ens.members_mut().iter_mut().enumerate() {
        let mut rng = rng::substream(master_seed, tag::PRETRAIN, m as u64, 0);
        let mut opt = OptimState::new(&member.net, lr);
        let mut nll = f64::NAN;
        for _ in 0..steps {
            let batch = buffer.sample(batch_size, &mut rng)?;
            let (grads, batch_nll) = transition_grad(member, &[], &batch, 0.0)?;
            nn::optim_step(&mut opt, &mut member.net, &grads)?;
            nll = batch_nll;
        }
        final_nll.push(nll);
    }
    Ok(final_nll)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Evaluation summary returned by the caller-supplied evaluator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub acceptance_rate: f64,
    /// Mean fit residual over accepted rollouts; absent when none pass.
    pub mean_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub acceptance_rate: f64,
    pub mean_residual: Option<f64>,
    pub policy_loss: f64,
    pub transition_nll: f64,
    pub buffer_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// CSV rendering; `config_comment` becomes a leading `#` line so every
    /// artifact carries the settings that produced it.
    pub fn to_csv(&self, config_comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = config_comment {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let residual = r.mean_residual.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.acceptance_rate, residual, r.policy_loss, r.transition_nll, r.buffer_size
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub bundle: ModelBundle,
    pub metrics: MetricsLog,
    /// Set when optimization blew up; the bundle then holds the last
    /// checkpoint that evaluated cleanly.
    pub diverged_at: Option<u64>,
}

fn is_divergence(err: &Error) -> bool {
    matches!(err, Error::NonFinite { .. } | Error::Diverged { .. })
}

/// Trains the policy (and the transition ensemble, when learned) on the
/// dataset. `evaluator` is called at every metrics point with the current
/// models; rollout quality criteria live with the caller, which knows the
/// task.
pub fn train<E: Environment>(
    mut policy: EnergyPolicyModel,
    mut transition: Transition,
    dataset: &DemoDataset,
    env: &E,
    cfg: &TrainConfig,
    seeds: BundleSeeds,
    mut evaluator: impl FnMut(&EnergyPolicyModel, &Transition, u64) -> EvalMetrics,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::empty("demonstration dataset"));
    }
    if dataset.state_dim != policy.state_dim || dataset.context_len != policy.context_len {
        return Err(Error::config("dataset does not match the policy dimensions"));
    }

    let mut batch_rng = rng::stream(cfg.seed, tag::BATCH);
    let mut posterior_rng = rng::stream(cfg.seed, tag::POSTERIOR);
    let mut prefill_rng = rng::stream(cfg.seed, tag::PREFILL);
    let mut rollout_rng = rng::stream(cfg.seed, tag::ROLLOUT);
    let mut transition_rng = rng::stream(cfg.seed, tag::TRANSITION_UPDATE);

    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let learned = matches!(transition, Transition::Learned(_));

    if learned && cfg.prefill_transitions > 0 {
        while buffer.len() < cfg.prefill_transitions {
            for s in collect_rollouts(&policy, env, &cfg.sampler, 1, &mut prefill_rng)? {
                buffer.push(s);
            }
        }
    }
    if learned && cfg.pretrain_steps > 0 && !buffer.is_empty() {
        let ens = transition.ensemble_mut().expect("learned transition has an ensemble");
        pretrain_transition(ens, &buffer, cfg.pretrain_steps, cfg.lr_transition, cfg.batch_size, cfg.seed)?;
    }

    let mut policy_opt =
        OptimState::new(&policy.net, cfg.lr_policy).with_weight_decay(cfg.weight_decay);
    let mut member_opts: Vec<OptimState> = match &transition {
        Transition::Learned(ens) => {
            ens.members().iter().map(|m| OptimState::new(&m.net, cfg.lr_transition)).collect()
        }
        Transition::Implanted(_) => Vec::new(),
    };

    let mut metrics = MetricsLog::default();
    let mut last_good = (policy.clone(), transition.clone());
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    let mut nll_sum = 0.0;
    let mut nll_count = 0u64;

    let mut diverged_at = None;
    for step in 0..cfg.iterations {
        let batch: Vec<&DemoSegment> = (0..cfg.batch_size)
            .map(|_| &dataset.segments[batch_rng.random_range(0..dataset.len())])
            .collect();

        let policy_step = policy_grad(&policy, &transition, &batch, cfg, &mut posterior_rng)
            .and_then(|(grads, stats)| {
                nn::optim_step(&mut policy_opt, &mut policy.net, &grads)?;
                Ok(stats)
            });
        match policy_step {
            Ok(stats) => {
                loss_sum += stats.surrogate_loss;
                loss_count += 1;
            }
            Err(e) if is_divergence(&e) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }

        if learned {
            let transition_step = (|| -> Result<()> {
                // Demonstration term: one posterior action draw per segment.
                let mut demo_samples = Vec::new();
                if cfg.w_beta > 0.0 {
                    for seg in &batch {
                        if let Some(s) = draw_posterior_action(
                            &policy,
                            &transition,
                            seg,
                            cfg,
                            &mut posterior_rng,
                        )? {
                            demo_samples.push(s);
                        }
                    }
                }
                let replay_samples = if buffer.is_empty() {
                    Vec::new()
                } else {
                    buffer.sample(cfg.batch_size, &mut transition_rng)?
                };
                if demo_samples.is_empty() && replay_samples.is_empty() {
                    return Ok(());
                }
                let ens = transition.ensemble_mut().expect("learned transition");
                for (member, opt) in ens.members_mut().iter_mut().zip(&mut member_opts) {
                    let (grads, nll) =
                        transition_grad(member, &demo_samples, &replay_samples, cfg.w_beta)?;
                    nn::optim_step(opt, &mut member.net, &grads)?;
                    nll_sum += nll;
                    nll_count += 1;
                }
                Ok(())
            })();
            match transition_step {
                Ok(()) => {}
                Err(e) if is_divergence(&e) => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }

            if (step + 1) % cfg.rollout_interval == 0 && cfg.rollouts_per_collection > 0 {
                match collect_rollouts(
                    &policy,
                    env,
                    &cfg.sampler,
                    cfg.rollouts_per_collection,
                    &mut rollout_rng,
                ) {
                    Ok(samples) => {
                        for s in samples {
                            buffer.push(s);
                        }
                    }
                    Err(e) if is_divergence(&e) => {
                        diverged_at = Some(step);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        if step % cfg.eval_interval == 0 || step + 1 == cfg.iterations {
            let eval = evaluator(&policy, &transition, step);
            metrics.rows.push(MetricsRow {
                step,
                acceptance_rate: eval.acceptance_rate,
                mean_residual: eval.mean_residual,
                policy_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
                transition_nll: if nll_count > 0 { nll_sum / nll_count as f64 } else { 0.0 },
                buffer_size: buffer.len(),
            });
            loss_sum = 0.0;
            loss_count = 0;
            nll_sum = 0.0;
            nll_count = 0;
            last_good = (policy.clone(), transition.clone());
        }
    }

    let bundle = if diverged_at.is_some() {
        ModelBundle::new(last_good.0, last_good.1, seeds)
    } else {
        ModelBundle::new(policy, transition, seeds)
    };
    Ok(TrainResult { bundle, metrics, diverged_at })
}

/// One action draw from the per-segment posterior, packaged as a
/// transition sample for the dynamics update. `None` when no sampled
/// action explains the segment.
fn draw_posterior_action(
    policy: &EnergyPolicyModel,
    transition: &Transition,
    seg: &DemoSegment,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<TransitionSample>> {
    let state = seg.context.current().to_vec();
    let action = match cfg.posterior_mode {
        PosteriorMode::Mcmc => {
            sample_posterior_mcmc(policy, transition, &seg.context, &seg.next_state, &cfg.sampler, rng)?
        }
        PosteriorMode::Importance => {
            let actions =
                sample_prior(policy, &seg.context, &cfg.sampler, cfg.sampler.n_samples, rng)?;
            let log_w: Vec<f64> = actions
                .iter()
                .map(|a| transition_logprob(transition, &state, a, &seg.next_state))
                .collect();
            if log_w.iter().all(|w| *w == f64::NEG_INFINITY) {
                return Ok(None);
            }
            let weights = normalize_log_weights(&log_w)?;
            // Weighted draw (inverse CDF).
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut pick = actions.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            actions.into_iter().nth(pick).unwrap()
        }
    };
    Ok(Some(TransitionSample { state, action, next_state: seg.next_state.clone() }))
}

// ---------------------------------------------------------------------------
// Behavior-cloning baseline
// ---------------------------------------------------------------------------

/// Deterministic regression policy mapping a context window to an action.
/// Needs action labels, so it only applies where actions can be recovered
/// from consecutive states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcPolicy {
    pub net: nn::MlpParams,
    pub context_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl BcPolicy {
    pub fn act(&self, ctx: &Context) -> Vec<f64> {
        nn::mlp_forward(&self.net, &ctx.flatten())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcExample {
    pub context: Context,
    pub action: Vec<f64>,
}

/// Fits the baseline by minibatch Adam on mean squared action error.
pub fn train_bc(
    examples: &[BcExample],
    hidden: &[usize],
    steps: u64,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<BcPolicy> {
    if examples.is_empty() {
        return Err(Error::empty("behavior-cloning dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let context_len = examples[0].context.len();
    let state_dim = examples[0].context.state_dim();
    let action_dim = examples[0].action.len();
    let mut dims = vec![context_len * state_dim];
    dims.extend_from_slice(hidden);
    dims.push(action_dim);
    let mut net = nn::mlp_init(&dims, nn::Activation::Swish, rng::mix(&[seed, tag::BC]))?;
    let mut opt = OptimState::new(&net, lr);
    let mut rng = rng::stream(seed, tag::BC);

    for _ in 0..steps {
        let mut grads = MlpGrads::zeros_like(&net);
        for _ in 0..batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let input = ex.context.flatten();
            let pred = nn::mlp_forward(&net, &input);
            let cot: Vec<f64> = pred
                .iter()
                .zip(&ex.action)
                .map(|(p, a)| 2.0 * (p - a) / batch_size as f64)
                .collect();
            let (g, _) = nn::mlp_grad(&net, &input, &cot);
            grads.axpy(1.0, &g);
        }
        nn::optim_step(&mut opt, &mut net, &grads)?;
    }
    Ok(BcPolicy { net, context_len, state_dim, action_dim })
}

/// Rolls out the cloning baseline; returns the visited state sequences.
pub fn rollout_bc<E: Environment>(
    bc: &BcPolicy,
    env: &E,
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n_rollouts);
    for _ in 0..n_rollouts {
        let mut history = vec![env.reset(rng)];
        for _ in 0..env.horizon() {
            let ctx = Context::from_history(&history, bc.context_len);
            let action = bc.act(&ctx);
            let next = env.step(history.last().unwrap(), &action);
            history.push(next);
        }
        out.push(history);
    }
    out
}
