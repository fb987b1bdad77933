//! Generative model components.
//!
//! A trajectory is modeled as an initial state, an energy-based policy over
//! actions conditioned on a fixed-length window of past states, and a
//! Gaussian transition density with fixed noise scale around a learned (or
//! analytically implanted) mean. The policy density is only ever used
//! unnormalized: its normalizer is intractable and nothing here needs it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, MlpGrads, MlpParams};
use crate::vecmath;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Context windows
// ---------------------------------------------------------------------------

/// A fixed-length window of past states, oldest first. Histories shorter
/// than the window are left-padded by repeating their first state, so the
/// policy sees the same context shape at every step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    states: Vec<Vec<f64>>,
}

impl Context {
    /// Builds a window directly from `states` (oldest first).
    ///
    /// Panics if `states` is empty or the state dims disagree.
    pub fn new(states: Vec<Vec<f64>>) -> Self {
        assert!(!states.is_empty(), "context needs at least one state");
        let dim = states[0].len();
        assert!(states.iter().all(|s| s.len() == dim), "context state dims disagree");
        Context { states }
    }

    /// Window of the last `len` states of `history`, left-padded with
    /// `history[0]` when the history is shorter than the window.
    ///
    /// Panics if `history` is empty or `len == 0`.
    pub fn from_history(history: &[Vec<f64>], len: usize) -> Self {
        assert!(!history.is_empty(), "history must be non-empty");
        assert!(len >= 1, "context length must be at least 1");
        let mut states = Vec::with_capacity(len);
        for i in 0..len {
            // Index into history so the last window entry is the last state.
            let idx = (history.len() + i).saturating_sub(len);
            let idx = idx.min(history.len() - 1);
            states.push(history[idx].clone());
        }
        Context::new(states)
    }

    /// The window after observing `next`: drops the oldest state.
    pub fn advanced(&self, next: &[f64]) -> Self {
        assert_eq!(next.len(), self.state_dim(), "state dim mismatch");
        let mut states = self.states.clone();
        states.remove(0);
        states.push(next.to_vec());
        Context { states }
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// The most recent state in the window.
    pub fn current(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction a context holds at least one state
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    /// Concatenation of all window states, oldest first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.state_dim());
        for s in &self.states {
            out.extend_from_slice(s);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Energy-based policy
// ---------------------------------------------------------------------------

/// Policy density `p(a | context) ∝ exp(f(a; context))` with `f` an MLP on
/// the concatenated window and action. Only unnormalized energies and their
/// gradients are exposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyPolicyModel {
    pub net: MlpParams,
    pub context_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Coefficient of the mean-squared-energy regularizer used in training;
    /// zero disables it.
    pub l2_energy_coef: f64,
}

impl EnergyPolicyModel {
    pub fn new(
        net: MlpParams,
        context_len: usize,
        state_dim: usize,
        action_dim: usize,
        l2_energy_coef: f64,
    ) -> Result<Self> {
        if context_len < 1 {
            return Err(Error::config("context length must be at least 1"));
        }
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::config("state and action dims must be positive"));
        }
        if l2_energy_coef < 0.0 {
            return Err(Error::config("energy regularizer coefficient must be non-negative"));
        }
        net.validate()?;
        let expect_in = context_len * state_dim + action_dim;
        if net.input_dim() != expect_in {
            return Err(Error::config(format!(
                "energy net input dim {} does not match context_len*state_dim+action_dim = {}",
                net.input_dim(),
                expect_in
            )));
        }
        if net.output_dim() != 1 {
            return Err(Error::config("energy net must have a single output"));
        }
        Ok(EnergyPolicyModel { net, context_len, state_dim, action_dim, l2_energy_coef })
    }

    /// Fresh policy with Glorot-initialized hidden layers.
    pub fn init(
        context_len: usize,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        l2_energy_coef: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![context_len * state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = nn::mlp_init(&dims, activation, seed)?;
        EnergyPolicyModel::new(net, context_len, state_dim, action_dim, l2_energy_coef)
    }
}

fn policy_input(policy: &EnergyPolicyModel, ctx: &Context, action: &[f64]) -> Vec<f64> {
    assert_eq!(ctx.len(), policy.context_len, "context window length mismatch");
    assert_eq!(ctx.state_dim(), policy.state_dim, "state dim mismatch");
    assert_eq!(action.len(), policy.action_dim, "action dim mismatch");
    let mut input = ctx.flatten();
    input.extend_from_slice(action);
    input
}

/// Unnormalized log-density (negative energy) of `action` in `ctx`.
pub fn energy(policy: &EnergyPolicyModel, ctx: &Context, action: &[f64]) -> f64 {
    nn::mlp_forward(&policy.net, &policy_input(policy, ctx, action))[0]
}

/// Gradient of the energy with respect to the action and to the policy
/// parameters.
pub fn energy_grads(
    policy: &EnergyPolicyModel,
    ctx: &Context,
    action: &[f64],
) -> (Vec<f64>, MlpGrads) {
    let input = policy_input(policy, ctx, action);
    let (param_grads, input_grad) = nn::mlp_grad(&policy.net, &input, &[1.0]);
    let split = policy.context_len * policy.state_dim;
    (input_grad[split..].to_vec(), param_grads)
}

/// Gradient of the energy with respect to the context states (flattened,
/// oldest first) and the action. Used by the goal planner, which needs
/// sensitivities through predicted states.
pub fn energy_input_grads(
    policy: &EnergyPolicyModel,
    ctx: &Context,
    action: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let input = policy_input(policy, ctx, action);
    let (_, input_grad) = nn::mlp_grad(&policy.net, &input, &[1.0]);
    let split = policy.context_len * policy.state_dim;
    (input_grad[..split].to_vec(), input_grad[split..].to_vec())
}

// ---------------------------------------------------------------------------
// Transition models
// ---------------------------------------------------------------------------

/// A Gaussian transition density: `s' ~ Normal(mean(s, a), sigma^2 I)`.
/// Implementations differ only in how the mean and its sensitivities are
/// computed, so samplers, training, and planning can treat learned and
/// implanted dynamics identically.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn sigma(&self) -> f64;
    fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64>;
    /// Vector-Jacobian product of the mean: for a cotangent on the predicted
    /// state, returns gradients with respect to the state and the action.
    fn mean_vjp(&self, state: &[f64], action: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// Log-density of `s_next` under the Gaussian transition.
pub fn transition_logprob<D: Dynamics + ?Sized>(
    dynamics: &D,
    state: &[f64],
    action: &[f64],
    s_next: &[f64],
) -> f64 {
    assert_eq!(s_next.len(), dynamics.state_dim(), "next-state dim mismatch");
    let mean = dynamics.mean(state, action);
    let d = dynamics.state_dim() as f64;
    let sig2 = dynamics.sigma() * dynamics.sigma();
    let sq = s_next.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
    -0.5 * d * (2.0 * std::f64::consts::PI * sig2).ln() - sq / (2.0 * sig2)
}

/// Mean prediction for `(state, action)`.
pub fn transition_mean<D: Dynamics + ?Sized>(dynamics: &D, state: &[f64], action: &[f64]) -> Vec<f64> {
    dynamics.mean(state, action)
}

/// Gradients of the transition log-density with respect to the current state
/// and the action. The residual `(s_next - mean) / sigma^2` is the cotangent
/// pushed back through the mean.
pub fn transition_logprob_input_grads<D: Dynamics + ?Sized>(
    dynamics: &D,
    state: &[f64],
    action: &[f64],
    s_next: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mean = dynamics.mean(state, action);
    let sig2 = dynamics.sigma() * dynamics.sigma();
    let cot: Vec<f64> = s_next.iter().zip(&mean).map(|(x, m)| (x - m) / sig2).collect();
    dynamics.mean_vjp(state, action, &cot)
}

/// Gradient of the transition log-density with respect to the action only.
pub fn transition_logprob_action_grad<D: Dynamics + ?Sized>(
    dynamics: &D,
    state: &[f64],
    action: &[f64],
    s_next: &[f64],
) -> Vec<f64> {
    transition_logprob_input_grads(dynamics, state, action, s_next).1
}

/// Learned transition: MLP mean over `(state, action)`, fixed noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTransitionModel {
    pub net: MlpParams,
    pub sigma: f64,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl GaussianTransitionModel {
    pub fn new(net: MlpParams, state_dim: usize, action_dim: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::config("transition noise scale must be positive"));
        }
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::config("state and action dims must be positive"));
        }
        net.validate()?;
        if net.input_dim() != state_dim + action_dim {
            return Err(Error::config(format!(
                "transition net input dim {} does not match state_dim+action_dim = {}",
                net.input_dim(),
                state_dim + action_dim
            )));
        }
        if net.output_dim() != state_dim {
            return Err(Error::config("transition net output dim must equal state dim"));
        }
        Ok(GaussianTransitionModel { net, sigma, state_dim, action_dim })
    }

    pub fn init(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(state_dim);
        let net = nn::mlp_init(&dims, activation, seed)?;
        GaussianTransitionModel::new(net, state_dim, action_dim, sigma)
    }

    fn input(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        assert_eq!(state.len(), self.state_dim, "state dim mismatch");
        assert_eq!(action.len(), self.action_dim, "action dim mismatch");
        let mut input = Vec::with_capacity(self.state_dim + self.action_dim);
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        input
    }
}

impl Dynamics for GaussianTransitionModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        nn::mlp_forward(&self.net, &self.input(state, action))
    }

    fn mean_vjp(&self, state: &[f64], action: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, input_grad) = nn::mlp_grad(&self.net, &self.input(state, action), cotangent);
        (input_grad[..self.state_dim].to_vec(), input_grad[self.state_dim..].to_vec())
    }
}

/// Gradient of the transition log-density with respect to the mean-network
/// parameters (and the action), for maximum-likelihood fitting.
pub fn transition_logprob_grads(
    model: &GaussianTransitionModel,
    state: &[f64],
    action: &[f64],
    s_next: &[f64],
) -> (Vec<f64>, MlpGrads) {
    assert_eq!(s_next.len(), model.state_dim, "next-state dim mismatch");
    let input = model.input(state, action);
    let mean = nn::mlp_forward(&model.net, &input);
    let sig2 = model.sigma * model.sigma;
    let cot: Vec<f64> = s_next.iter().zip(&mean).map(|(x, m)| (x - m) / sig2).collect();
    let (param_grads, input_grad) = nn::mlp_grad(&model.net, &input, &cot);
    (input_grad[model.state_dim..].to_vec(), param_grads)
}

/// Implanted dynamics: an exact affine mean `A s + B a + offset`. Covers
/// environments whose transition is known in closed form, behind the same
/// interface as the learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransition {
    pub state_dim: usize,
    pub action_dim: usize,
    /// `state_dim x state_dim`, row-major.
    pub state_matrix: Vec<f64>,
    /// `state_dim x action_dim`, row-major.
    pub action_matrix: Vec<f64>,
    pub offset: Vec<f64>,
    pub sigma: f64,
}

impl AffineTransition {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        state_matrix: Vec<f64>,
        action_matrix: Vec<f64>,
        offset: Vec<f64>,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::config("transition noise scale must be positive"));
        }
        if state_matrix.len() != state_dim * state_dim
            || action_matrix.len() != state_dim * action_dim
            || offset.len() != state_dim
        {
            return Err(Error::config("affine transition matrix shapes disagree with dims"));
        }
        Ok(AffineTransition { state_dim, action_dim, state_matrix, action_matrix, offset, sigma })
    }
}

impl Dynamics for AffineTransition {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        assert_eq!(state.len(), self.state_dim, "state dim mismatch");
        assert_eq!(action.len(), self.action_dim, "action dim mismatch");
        let mut out = self.offset.clone();
        for r in 0..self.state_dim {
            out[r] += vecmath::dot(&self.state_matrix[r * self.state_dim..(r + 1) * self.state_dim], state);
            out[r] += vecmath::dot(&self.action_matrix[r * self.action_dim..(r + 1) * self.action_dim], action);
        }
        out
    }

    fn mean_vjp(&self, _state: &[f64], _action: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(cotangent.len(), self.state_dim, "cotangent dim mismatch");
        let mut gs = vec![0.0; self.state_dim];
        let mut ga = vec![0.0; self.action_dim];
        for r in 0..self.state_dim {
            let c = cotangent[r];
            for (g, w) in gs.iter_mut().zip(&self.state_matrix[r * self.state_dim..(r + 1) * self.state_dim]) {
                *g += c * w;
            }
            for (g, w) in ga.iter_mut().zip(&self.action_matrix[r * self.action_dim..(r + 1) * self.action_dim]) {
                *g += c * w;
            }
        }
        (gs, ga)
    }
}

/// Two independently trained transition models. Their prediction
/// disagreement estimates epistemic uncertainty; densities and means are
/// served by the first member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEnsemble {
    members: Vec<GaussianTransitionModel>,
}

pub const ENSEMBLE_SIZE: usize = 2;

impl TransitionEnsemble {
    pub fn new(members: Vec<GaussianTransitionModel>) -> Result<Self> {
        if members.len() != ENSEMBLE_SIZE {
            return Err(Error::config(format!(
                "transition ensemble holds exactly {ENSEMBLE_SIZE} members, got {}",
                members.len()
            )));
        }
        let (m0, m1) = (&members[0], &members[1]);
        if m0.state_dim != m1.state_dim || m0.action_dim != m1.action_dim || m0.sigma != m1.sigma {
            return Err(Error::config("ensemble members disagree on dims or noise scale"));
        }
        Ok(TransitionEnsemble { members })
    }

    pub fn members(&self) -> &[GaussianTransitionModel] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [GaussianTransitionModel] {
        &mut self.members
    }
}

impl Dynamics for TransitionEnsemble {
    fn state_dim(&self) -> usize {
        self.members[0].state_dim
    }

    fn action_dim(&self) -> usize {
        self.members[0].action_dim
    }

    fn sigma(&self) -> f64 {
        self.members[0].sigma
    }

    fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        self.members[0].mean(state, action)
    }

    fn mean_vjp(&self, state: &[f64], action: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.members[0].mean_vjp(state, action, cotangent)
    }
}

/// Euclidean distance between the two members' mean predictions.
pub fn ensemble_disagreement(ens: &TransitionEnsemble, state: &[f64], action: &[f64]) -> f64 {
    let a = ens.members[0].mean(state, action);
    let b = ens.members[1].mean(state, action);
    vecmath::dist(&a, &b)
}

/// Transition representation stored in a model bundle: either a learned
/// ensemble or implanted analytic dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Learned(TransitionEnsemble),
    Implanted(AffineTransition),
}

impl Transition {
    pub fn ensemble(&self) -> Option<&TransitionEnsemble> {
        match self {
            Transition::Learned(e) => Some(e),
            Transition::Implanted(_) => None,
        }
    }

    pub fn ensemble_mut(&mut self) -> Option<&mut TransitionEnsemble> {
        match self {
            Transition::Learned(e) => Some(e),
            Transition::Implanted(_) => None,
        }
    }
}

impl Dynamics for Transition {
    fn state_dim(&self) -> usize {
        match self {
            Transition::Learned(e) => e.state_dim(),
            Transition::Implanted(a) => a.state_dim(),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            Transition::Learned(e) => e.action_dim(),
            Transition::Implanted(a) => a.action_dim(),
        }
    }

    fn sigma(&self) -> f64 {
        match self {
            Transition::Learned(e) => e.sigma(),
            Transition::Implanted(a) => a.sigma(),
        }
    }

    fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        match self {
            Transition::Learned(e) => e.mean(state, action),
            Transition::Implanted(a) => a.mean(state, action),
        }
    }

    fn mean_vjp(&self, state: &[f64], action: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Transition::Learned(e) => e.mean_vjp(state, action, cotangent),
            Transition::Implanted(a) => a.mean_vjp(state, action, cotangent),
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory log-joint
// ---------------------------------------------------------------------------

/// Sum over steps of `energy(a_t; context_t) + log p(s_{t+1} | s_t, a_t)`,
/// with contexts built by the left-padding rule. This is the trajectory
/// log-density up to the policy normalizers, which are constant in the
/// actions. An empty action sequence scores 0.
pub fn trajectory_log_joint<D: Dynamics + ?Sized>(
    policy: &EnergyPolicyModel,
    dynamics: &D,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
) -> Result<f64> {
    if states.len() != actions.len() + 1 {
        return Err(Error::config(format!(
            "expected one more state than actions, got {} states / {} actions",
            states.len(),
            actions.len()
        )));
    }
    let mut total = 0.0;
    for (t, action) in actions.iter().enumerate() {
        let ctx = Context::from_history(&states[..=t], policy.context_len);
        total += energy(policy, &ctx, action);
        total += transition_logprob(dynamics, &states[t], action, &states[t + 1]);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// Seeds recorded alongside a trained model so runs can be reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSeeds {
    pub master: u64,
    pub policy_init: u64,
    pub transition_init: Vec<u64>,
}

/// Everything needed to run a trained model: policy, transition, dims, and
/// provenance seeds. Serialized as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub policy: EnergyPolicyModel,
    pub transition: Transition,
    pub seeds: BundleSeeds,
    /// Opaque caller-settings echo for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ModelBundle {
    pub fn new(policy: EnergyPolicyModel, transition: Transition, seeds: BundleSeeds) -> Self {
        ModelBundle { version: BUNDLE_FORMAT_VERSION, policy, transition, seeds, config: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != BUNDLE_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported bundle version {} (expected {BUNDLE_FORMAT_VERSION})",
                self.version
            )));
        }
        self.policy.net.validate()?;
        // Re-run constructor checks on the deserialized pieces.
        EnergyPolicyModel::new(
            self.policy.net.clone(),
            self.policy.context_len,
            self.policy.state_dim,
            self.policy.action_dim,
            self.policy.l2_energy_coef,
        )?;
        match &self.transition {
            Transition::Learned(e) => {
                for m in e.members() {
                    GaussianTransitionModel::new(m.net.clone(), m.state_dim, m.action_dim, m.sigma)?;
                }
            }
            Transition::Implanted(a) => {
                AffineTransition::new(
                    a.state_dim,
                    a.action_dim,
                    a.state_matrix.clone(),
                    a.action_matrix.clone(),
                    a.offset.clone(),
                    a.sigma,
                )?;
            }
        }
        if self.transition.state_dim() != self.policy.state_dim
            || self.transition.action_dim() != self.policy.action_dim
        {
            return Err(Error::format("policy and transition dims disagree"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bundle: ModelBundle = serde_json::from_str(text)?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
