//! Acting and goal-directed planning.
//!
//! Executing the policy needs no machinery beyond one prior sample per
//! step. Planning optimizes a whole action sequence by Langevin ascent on
//! the sequence's policy energy plus the log-density of landing on the
//! goal, with states rolled forward through the transition mean and
//! gradients backpropagated through the rollout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    energy, energy_input_grads, transition_logprob, transition_logprob_input_grads, Context,
    Dynamics, EnergyPolicyModel,
};
use crate::sampling::{langevin_chain, sample_prior, LangevinConfig};
use crate::training::Environment;

/// Runs one episode with the policy, drawing a single prior chain per
/// step. Returns the visited states, starting with the reset state.
pub fn execute_policy<E: Environment>(
    policy: &EnergyPolicyModel,
    env: &E,
    sampler: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut history = vec![env.reset(rng)];
    for _ in 0..env.horizon() {
        let ctx = Context::from_history(&history, policy.context_len);
        let action = sample_prior(policy, &ctx, sampler, 1, rng)?.pop().unwrap();
        let next = env.step(history.last().unwrap(), &action);
        history.push(next);
    }
    Ok(history)
}

/// A planned action sequence with its predicted consequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<Vec<f64>>,
    /// Mean rollout of the plan: one state per action, ending at the
    /// predicted landing point. The current state is not repeated here.
    pub predicted_states: Vec<Vec<f64>>,
    pub goal: Vec<f64>,
    /// Distance between the predicted landing state and the goal.
    pub residual_to_goal: f64,
    /// Set when the prior initialization failed and the optimizer started
    /// from uniform actions instead.
    pub used_uniform_init: bool,
}

/// `prefix` extended by applying `actions` through the transition mean.
fn rollout_history<D: Dynamics + ?Sized>(
    dynamics: &D,
    prefix: &[Vec<f64>],
    actions: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut history = Vec::with_capacity(prefix.len() + actions.len());
    history.extend_from_slice(prefix);
    for a in actions {
        let next = dynamics.mean(history.last().unwrap(), a);
        history.push(next);
    }
    history
}

/// The planning objective: total policy energy of the action sequence
/// along the mean rollout continuing `prefix`, plus the log-density of
/// reaching `goal` on the final transition.
pub fn plan_objective<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    prefix: &[Vec<f64>],
    actions: &[Vec<f64>],
    goal: &[f64],
) -> f64 {
    let m = prefix.len();
    let n = actions.len();
    let history = rollout_history(dynamics, prefix, actions);
    let mut total = 0.0;
    for (k, a) in actions.iter().enumerate() {
        let ctx = Context::from_history(&history[..m + k], policy.context_len);
        total += energy(policy, &ctx, a);
    }
    total + transition_logprob(dynamics, &history[m + n - 2], &actions[n - 1], goal)
}

/// Objective value and its gradient with respect to every action,
/// flattened in step order. Gradients flow through the rolled-out states:
/// each context slot routes back to the state it reads (prefix states are
/// constants and absorb nothing), and state sensitivities chain backward
/// through the transition mean.
pub fn plan_objective_grad<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    prefix: &[Vec<f64>],
    actions: &[Vec<f64>],
    goal: &[f64],
) -> (f64, Vec<f64>) {
    let m = prefix.len();
    let n = actions.len();
    let state_dim = dynamics.state_dim();
    let action_dim = dynamics.action_dim();
    let window = policy.context_len;
    let history = rollout_history(dynamics, prefix, actions);

    let mut value = 0.0;
    let mut grad_states = vec![vec![0.0; state_dim]; m + n];
    let mut grad_actions = vec![vec![0.0; action_dim]; n];

    // Final-step goal density.
    value += transition_logprob(dynamics, &history[m + n - 2], &actions[n - 1], goal);
    let (gs, ga) =
        transition_logprob_input_grads(dynamics, &history[m + n - 2], &actions[n - 1], goal);
    for (acc, g) in grad_states[m + n - 2].iter_mut().zip(&gs) {
        *acc += g;
    }
    for (acc, g) in grad_actions[n - 1].iter_mut().zip(&ga) {
        *acc += g;
    }

    // Reverse pass: by step k every later term has already deposited its
    // sensitivity into the state current at step k (history index m+k-1),
    // and step k's own energy completes it, so it can then be chained
    // through the mean that produced it.
    for k in (0..n).rev() {
        let ctx = Context::from_history(&history[..m + k], window);
        value += energy(policy, &ctx, &actions[k]);
        let (g_ctx, g_act) = energy_input_grads(policy, &ctx, &actions[k]);
        for (acc, g) in grad_actions[k].iter_mut().zip(&g_act) {
            *acc += g;
        }
        for slot in 0..window {
            // Mirror of the window rule: slot i of a length-(m+k) history
            // reads index max(0, m+k+i-window).
            let idx = (m + k + slot).saturating_sub(window).min(m + k - 1);
            let piece = &g_ctx[slot * state_dim..(slot + 1) * state_dim];
            for (acc, g) in grad_states[idx].iter_mut().zip(piece) {
                *acc += g;
            }
        }
        if k > 0 {
            let cot = grad_states[m + k - 1].clone();
            let (gs_prev, ga_prev) =
                dynamics.mean_vjp(&history[m + k - 2], &actions[k - 1], &cot);
            for (acc, g) in grad_states[m + k - 2].iter_mut().zip(&gs_prev) {
                *acc += g;
            }
            for (acc, g) in grad_actions[k - 1].iter_mut().zip(&ga_prev) {
                *acc += g;
            }
        }
    }

    (value, grad_actions.into_iter().flatten().collect())
}

/// Optimizes an action sequence from the end of `prefix` toward `goal` by
/// Langevin ascent on [`plan_objective`]. Actions are initialized by an
/// autoregressive prior rollout; if that fails (for instance on a freshly
/// broken model) the optimizer starts from uniform actions instead and
/// says so in the plan.
pub fn plan_goal<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    prefix: &[Vec<f64>],
    goal: &[f64],
    steps_to_go: usize,
    sampler: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Plan> {
    if steps_to_go == 0 {
        return Err(Error::config("planning needs at least one step"));
    }
    if prefix.is_empty() {
        return Err(Error::empty("state prefix"));
    }
    if prefix.iter().any(|s| s.len() != dynamics.state_dim()) || goal.len() != dynamics.state_dim()
    {
        return Err(Error::config("prefix and goal must have the transition's state dim"));
    }
    if policy.state_dim != dynamics.state_dim() || policy.action_dim != dynamics.action_dim() {
        return Err(Error::config("policy and transition dimensions disagree"));
    }
    sampler.validate()?;
    let action_dim = dynamics.action_dim();

    // Seed the chain with what the policy would do on its own.
    let mut used_uniform_init = false;
    let init: Vec<f64> = match prior_init(policy, dynamics, prefix, steps_to_go, sampler, rng) {
        Ok(actions) => actions.into_iter().flatten().collect(),
        Err(_) => {
            used_uniform_init = true;
            (0..steps_to_go * action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    };

    let grad_fn = |flat: &[f64]| {
        let actions = unflatten(flat, action_dim);
        plan_objective_grad(policy, dynamics, prefix, &actions, goal).1
    };
    let best = langevin_chain(grad_fn, &init, sampler, rng)?;

    let actions = unflatten(&best, action_dim);
    let m = prefix.len();
    let predicted_states = rollout_history(dynamics, prefix, &actions)[m..].to_vec();
    let residual_to_goal = crate::vecmath::dist(predicted_states.last().unwrap(), goal);
    Ok(Plan { actions, predicted_states, goal: goal.to_vec(), residual_to_goal, used_uniform_init })
}

fn prior_init<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    prefix: &[Vec<f64>],
    steps: usize,
    sampler: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut history = prefix.to_vec();
    let mut actions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let ctx = Context::from_history(&history, policy.context_len);
        let action = sample_prior(policy, &ctx, sampler, 1, rng)?.pop().unwrap();
        let next = dynamics.mean(history.last().unwrap(), &action);
        history.push(next);
        actions.push(action);
    }
    Ok(actions)
}

fn unflatten(flat: &[f64], action_dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(action_dim).map(|c| c.to_vec()).collect()
}

/// CSV rendering of a plan: one row per step with the action taken and
/// the state predicted after it.
pub fn plan_to_csv(plan: &Plan, config_comment: Option<&str>) -> String {
    let action_dim = plan.actions.first().map(|a| a.len()).unwrap_or(0);
    let state_dim = plan.goal.len();
    let mut out = String::new();
    if let Some(c) = config_comment {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str("step");
    for j in 0..action_dim {
        out.push_str(&format!(",action_{j}"));
    }
    for j in 0..state_dim {
        out.push_str(&format!(",pred_state_{j}"));
    }
    out.push('\n');
    for (k, action) in plan.actions.iter().enumerate() {
        out.push_str(&k.to_string());
        for v in action {
            out.push_str(&format!(",{v}"));
        }
        for v in &plan.predicted_states[k] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
