//! Exact tabular counterpart of the continuous model.
//!
//! Instances are small enough (at most 8 states, 8 actions, horizon 4) that
//! every quantity of interest — trajectory marginals, action posteriors,
//! policy gradients, values — is computable by brute-force enumeration. The
//! continuous estimators and the identities they rely on are verified here
//! with no sampling error in the reference values.
//!
//! The policy is tabular-softmax over logits indexed by the *full* state
//! history (one row per context), which makes the instance genuinely
//! non-Markov: nothing forces two histories ending in the same state to act
//! alike.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::normalize_log_weights;

pub const MAX_STATES: usize = 8;
pub const MAX_ACTIONS: usize = 8;
pub const MAX_HORIZON: usize = 4;

/// Probability rows must sum to one within this.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Per-step posterior products must match the joint posterior within this.
pub const FACTORIZATION_TOL: f64 = 1e-12;
/// Likelihood-reweighted prior must match the exact posterior within this.
pub const IMPORTANCE_TOL: f64 = 1e-12;
/// Enumerated policy gradient vs central finite differences, relative.
pub const GRADIENT_FD_RELTOL: f64 = 1e-6;
/// Value/Q identities from the optimality analysis.
pub const THEOREM_TOL: f64 = 1e-10;
/// Soft-Q sweep convergence threshold.
pub const SOFT_Q_TOL: f64 = 1e-10;
/// A second soft-Q sweep must change nothing beyond this.
pub const SOFT_Q_IDEMPOTENT_TOL: f64 = 1e-12;
/// Total variation between the soft-Q induced policy and the exact one.
pub const SOFT_Q_TV_TOL: f64 = 1e-8;

pub const INSTANCE_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Context indexing
// ---------------------------------------------------------------------------

/// Flat indexing of all state histories `s_{0..t}` for decision steps
/// `t = 0..horizon`. Level `t` holds `n_states^(t+1)` contexts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextIndex {
    n_states: usize,
    horizon: usize,
    offsets: Vec<usize>,
    total: usize,
}

impl ContextIndex {
    pub fn new(n_states: usize, horizon: usize) -> Self {
        let mut offsets = Vec::with_capacity(horizon + 1);
        let mut total = 0usize;
        let mut level = n_states;
        for _ in 0..horizon {
            offsets.push(total);
            total += level;
            level *= n_states;
        }
        offsets.push(total);
        ContextIndex { n_states, horizon, offsets, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn level_count(&self, t: usize) -> usize {
        self.offsets[t + 1] - self.offsets[t]
    }

    /// Flat index of the context `seq` (a history of length 1..=horizon).
    pub fn index(&self, seq: &[usize]) -> usize {
        assert!(!seq.is_empty() && seq.len() <= self.horizon, "context length out of range");
        let mut code = 0usize;
        let mut scale = 1usize;
        for &s in seq {
            debug_assert!(s < self.n_states);
            code += s * scale;
            scale *= self.n_states;
        }
        self.offsets[seq.len() - 1] + code
    }

    /// Inverse of [`ContextIndex::index`].
    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        assert!(idx < self.total, "context index out of range");
        let level = match self.offsets.binary_search(&idx) {
            Ok(t) if t < self.horizon => t,
            Ok(t) => t - 1,
            Err(t) => t - 1,
        };
        idx -= self.offsets[level];
        let mut seq = Vec::with_capacity(level + 1);
        for _ in 0..=level {
            seq.push(idx % self.n_states);
            idx /= self.n_states;
        }
        seq
    }

    /// All contexts of level `t` (histories of length `t + 1`).
    pub fn enumerate_level(&self, t: usize) -> Vec<Vec<usize>> {
        (self.offsets[t]..self.offsets[t + 1]).map(|i| self.decode(i)).collect()
    }
}

// ---------------------------------------------------------------------------
// Tabular instance
// ---------------------------------------------------------------------------

/// A fully enumerable instance: categorical initial distribution, categorical
/// transition kernel, and softmax policy logits with one row per history.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularNmdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `n_states` entries, sums to one.
    pub initial: Vec<f64>,
    /// `[s][a][s']` flattened; each `(s, a)` row sums to one.
    pub transition: Vec<f64>,
    /// `n_contexts x n_actions` flattened logits.
    pub policy_logits: Vec<f64>,
    ctx: ContextIndex,
}

impl TabularNmdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        initial: Vec<f64>,
        transition: Vec<f64>,
        policy_logits: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_states > MAX_STATES {
            return Err(Error::config(format!("n_states must be in 1..={MAX_STATES}")));
        }
        if n_actions == 0 || n_actions > MAX_ACTIONS {
            return Err(Error::config(format!("n_actions must be in 1..={MAX_ACTIONS}")));
        }
        if horizon == 0 || horizon > MAX_HORIZON {
            return Err(Error::config(format!("horizon must be in 1..={MAX_HORIZON}")));
        }
        if initial.len() != n_states {
            return Err(Error::config("initial distribution length mismatch"));
        }
        check_distribution(&initial, "initial distribution")?;
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::config("transition table length mismatch"));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                check_distribution(row, &format!("transition row (s={s}, a={a})"))?;
            }
        }
        let ctx = ContextIndex::new(n_states, horizon);
        if policy_logits.len() != ctx.total() * n_actions {
            return Err(Error::config(format!(
                "policy logits: expected {} entries ({} contexts x {} actions), found {}",
                ctx.total() * n_actions,
                ctx.total(),
                n_actions,
                policy_logits.len()
            )));
        }
        if policy_logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::config("policy logits must be finite"));
        }
        Ok(TabularNmdp { n_states, n_actions, horizon, initial, transition, policy_logits, ctx })
    }

    /// Random full-support instance; deterministic in `seed`.
    pub fn random(
        seed: u64,
        n_states: usize,
        n_actions: usize,
        horizon: usize,
    ) -> Result<Self> {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw_row = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
            // Pin the row sum to exactly 1 to survive the strict row check.
            let adjust: f64 = 1.0 - row.iter().sum::<f64>();
            row[0] += adjust;
            row
        };
        let initial = draw_row(n_states, &mut rng);
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(draw_row(n_states, &mut rng));
        }
        let ctx = ContextIndex::new(n_states, horizon);
        let policy_logits: Vec<f64> =
            (0..ctx.total() * n_actions).map(|_| rng.random_range(-1.5..1.5)).collect();
        TabularNmdp::new(n_states, n_actions, horizon, initial, transition, policy_logits)
    }

    pub fn context_index(&self) -> &ContextIndex {
        &self.ctx
    }

    pub fn n_contexts(&self) -> usize {
        self.ctx.total()
    }

    #[inline]
    pub fn trans_prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// Softmax policy over actions for the history `seq`.
    pub fn policy_probs(&self, seq: &[usize]) -> Vec<f64> {
        let row = self.logits_row(seq);
        softmax(row)
    }

    pub fn logits_row(&self, seq: &[usize]) -> &[f64] {
        let idx = self.ctx.index(seq);
        &self.policy_logits[idx * self.n_actions..(idx + 1) * self.n_actions]
    }

    /// All state sequences of length `horizon + 1`.
    pub fn enumerate_state_seqs(&self) -> Vec<Vec<usize>> {
        enumerate_tuples(self.n_states, self.horizon + 1)
    }

    fn check_seq(&self, state_seq: &[usize]) -> Result<()> {
        if state_seq.len() < 2 || state_seq.len() > self.horizon + 1 {
            return Err(Error::config(format!(
                "state sequence length must be in 2..={}, got {}",
                self.horizon + 1,
                state_seq.len()
            )));
        }
        if state_seq.iter().any(|&s| s >= self.n_states) {
            return Err(Error::config("state id out of range"));
        }
        Ok(())
    }

    /// Probability of a full action-annotated path.
    fn path_prob(&self, state_seq: &[usize], actions: &[usize]) -> f64 {
        let mut p = self.initial[state_seq[0]];
        for (t, &a) in actions.iter().enumerate() {
            let pol = self.policy_probs(&state_seq[..=t]);
            p *= pol[a] * self.trans_prob(state_seq[t], a, state_seq[t + 1]);
        }
        p
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config(format!("{what}: entries must lie in [0, 1]")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::config(format!("{what}: sums to {sum}, not 1")));
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn enumerate_tuples(base: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(base.pow(len as u32));
    let mut cur = vec![0usize; len];
    loop {
        out.push(cur.clone());
        let mut i = 0;
        loop {
            if i == len {
                return out;
            }
            cur[i] += 1;
            if cur[i] < base {
                break;
            }
            cur[i] = 0;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Marginals, posteriors, gradients
// ---------------------------------------------------------------------------

/// Log-probability of the state sequence with all latent actions summed out
/// by full enumeration. Zero-probability sequences yield `-inf`.
pub fn exact_log_marginal(tab: &TabularNmdp, state_seq: &[usize]) -> Result<f64> {
    tab.check_seq(state_seq)?;
    let n_trans = state_seq.len() - 1;
    let mut total = 0.0;
    for actions in enumerate_tuples(tab.n_actions, n_trans) {
        total += tab.path_prob(state_seq, &actions);
    }
    Ok(total.ln())
}

/// Exact posterior over the latent actions behind `state_seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    /// Joint posterior over action tuples; index `sum_t a_t * n_actions^t`.
    pub joint: Vec<f64>,
    /// `per_step[t][a]`: closed-form single-step posterior given the states
    /// up to `t + 1`.
    pub per_step: Vec<Vec<f64>>,
}

/// Enumerates the joint action posterior and the per-step closed form.
///
/// Errors if the sequence has zero probability (nothing to condition on).
pub fn exact_posterior(tab: &TabularNmdp, state_seq: &[usize]) -> Result<ExactPosterior> {
    tab.check_seq(state_seq)?;
    let n_trans = state_seq.len() - 1;
    let tuples = enumerate_tuples(tab.n_actions, n_trans);
    let mut joint: Vec<f64> = Vec::with_capacity(tuples.len());
    let mut total = 0.0;
    for actions in &tuples {
        let p = tab.path_prob(state_seq, actions);
        joint.push(p);
        total += p;
    }
    if total <= 0.0 {
        return Err(Error::config("state sequence has zero probability under the model"));
    }
    for p in joint.iter_mut() {
        *p /= total;
    }

    let mut per_step = Vec::with_capacity(n_trans);
    for t in 0..n_trans {
        let pol = tab.policy_probs(&state_seq[..=t]);
        let mut row: Vec<f64> = (0..tab.n_actions)
            .map(|a| pol[a] * tab.trans_prob(state_seq[t], a, state_seq[t + 1]))
            .collect();
        let z: f64 = row.iter().sum();
        if z <= 0.0 {
            return Err(Error::config(format!(
                "transition at step {t} has zero probability under every action"
            )));
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        per_step.push(row);
    }
    Ok(ExactPosterior { joint, per_step })
}

/// Max deviation between the joint posterior and the product of per-step
/// posteriors, over all action tuples. Exactness of this factorization is
/// what licenses training one step at a time.
pub fn posterior_factorization_check(tab: &TabularNmdp, state_seq: &[usize]) -> Result<f64> {
    let post = exact_posterior(tab, state_seq)?;
    let n_trans = state_seq.len() - 1;
    let mut worst = 0.0_f64;
    for (idx, actions) in enumerate_tuples(tab.n_actions, n_trans).iter().enumerate() {
        let product: f64 = (0..n_trans).map(|t| post.per_step[t][actions[t]]).product();
        worst = worst.max((product - post.joint[idx]).abs());
    }
    Ok(worst)
}

/// Exact gradient of `exact_log_marginal` with respect to every policy
/// logit: per visited context, posterior minus prior action probabilities.
/// Returned flat over `n_contexts x n_actions`.
pub fn exact_policy_gradient(tab: &TabularNmdp, state_seq: &[usize]) -> Result<Vec<f64>> {
    let post = exact_posterior(tab, state_seq)?;
    let mut grad = vec![0.0; tab.n_contexts() * tab.n_actions];
    for (t, step_post) in post.per_step.iter().enumerate() {
        let ctx_idx = tab.ctx.index(&state_seq[..=t]);
        let prior = tab.policy_probs(&state_seq[..=t]);
        for a in 0..tab.n_actions {
            grad[ctx_idx * tab.n_actions + a] += step_post[a] - prior[a];
        }
    }
    Ok(grad)
}

/// Central finite differences of `exact_log_marginal` over every logit, for
/// cross-validating [`exact_policy_gradient`].
pub fn fd_log_marginal_grad(tab: &TabularNmdp, state_seq: &[usize], eps: f64) -> Result<Vec<f64>> {
    tab.check_seq(state_seq)?;
    let mut grad = vec![0.0; tab.policy_logits.len()];
    let mut perturbed = tab.clone();
    for i in 0..grad.len() {
        let orig = tab.policy_logits[i];
        perturbed.policy_logits[i] = orig + eps;
        let plus = exact_log_marginal(&perturbed, state_seq)?;
        perturbed.policy_logits[i] = orig - eps;
        let minus = exact_log_marginal(&perturbed, state_seq)?;
        perturbed.policy_logits[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max deviation between the single-step posterior computed two ways:
/// marginalizing the enumerated joint onto each step, and reweighting the
/// prior by the transition likelihood (normalized by its prior mean).
pub fn importance_identity_check(tab: &TabularNmdp, state_seq: &[usize]) -> Result<f64> {
    tab.check_seq(state_seq)?;
    let n_trans = state_seq.len() - 1;
    let tuples = enumerate_tuples(tab.n_actions, n_trans);
    let probs: Vec<f64> = tuples.iter().map(|a| tab.path_prob(state_seq, a)).collect();
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("state sequence has zero probability under the model"));
    }

    let mut worst = 0.0_f64;
    for t in 0..n_trans {
        // Marginal of the joint posterior onto step t.
        let mut from_joint = vec![0.0; tab.n_actions];
        for (tuple, &p) in tuples.iter().zip(&probs) {
            from_joint[tuple[t]] += p / total;
        }
        // Likelihood-reweighted prior: prior(a) * p(s_{t+1} | s_t, a) / c,
        // with c the prior mean of the likelihood.
        let prior = tab.policy_probs(&state_seq[..=t]);
        let lik: Vec<f64> =
            (0..tab.n_actions).map(|a| tab.trans_prob(state_seq[t], a, state_seq[t + 1])).collect();
        let c: f64 = prior.iter().zip(&lik).map(|(p, l)| p * l).sum();
        for a in 0..tab.n_actions {
            let reweighted = prior[a] * lik[a] / c;
            worst = worst.max((reweighted - from_joint[a]).abs());
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Demonstration distribution
// ---------------------------------------------------------------------------

/// Exact next-state conditionals of a teacher model: `p(s_{t+1} | s_{0:t})`
/// for every history, plus the initial distribution. This is the
/// distribution state-only demonstrations are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDistribution {
    pub n_states: usize,
    pub horizon: usize,
    pub initial: Vec<f64>,
    /// `n_contexts x n_states`: conditional next-state distribution.
    pub conditionals: Vec<f64>,
    ctx: ContextIndex,
}

impl DemoDistribution {
    /// Marginalizes the teacher's policy out of its transition kernel.
    pub fn from_model(teacher: &TabularNmdp) -> Self {
        let ctx = teacher.ctx.clone();
        let mut conditionals = vec![0.0; ctx.total() * teacher.n_states];
        for t in 0..teacher.horizon {
            for seq in ctx.enumerate_level(t) {
                let idx = ctx.index(&seq);
                let pol = teacher.policy_probs(&seq);
                let s = *seq.last().unwrap();
                for a in 0..teacher.n_actions {
                    for s_next in 0..teacher.n_states {
                        conditionals[idx * teacher.n_states + s_next] +=
                            pol[a] * teacher.trans_prob(s, a, s_next);
                    }
                }
            }
        }
        DemoDistribution {
            n_states: teacher.n_states,
            horizon: teacher.horizon,
            initial: teacher.initial.clone(),
            conditionals,
            ctx,
        }
    }

    #[inline]
    pub fn conditional(&self, seq: &[usize]) -> &[f64] {
        let idx = self.ctx.index(seq);
        &self.conditionals[idx * self.n_states..(idx + 1) * self.n_states]
    }

    /// Probability of a full state sequence.
    pub fn seq_marginal(&self, state_seq: &[usize]) -> f64 {
        let mut p = self.initial[state_seq[0]];
        for t in 0..state_seq.len() - 1 {
            p *= self.conditional(&state_seq[..=t])[state_seq[t + 1]];
        }
        p
    }

    /// Draws one state sequence; deterministic in the RNG state.
    pub fn sample_sequence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut seq = vec![sample_categorical(&self.initial, rng)];
        for _ in 0..self.horizon {
            let cond = self.conditional(&seq).to_vec();
            seq.push(sample_categorical(&cond, rng));
        }
        seq
    }
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

// ---------------------------------------------------------------------------
// Values under a demonstration distribution
// ---------------------------------------------------------------------------

/// Per-context value tables for a policy evaluated against an exact
/// demonstration distribution.
///
/// `reward[ctx][s']` is the log prior predictive of the next state under the
/// evaluated policy and the true kernel. `v` accumulates expected reward
/// under the demo distribution with no entropy terms; `q` adds the log
/// policy probability of the first action to the backup, so `q - v` is
/// exactly the log policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftValues {
    pub n_actions: usize,
    pub n_states: usize,
    /// `n_contexts x n_states`.
    pub reward: Vec<f64>,
    /// `n_contexts`.
    pub v: Vec<f64>,
    /// `n_contexts x n_actions`.
    pub q: Vec<f64>,
}

/// Backward-induction values of `policy_logits` against `demo`. The
/// transition kernel is taken from `tab`; the policy may be any logits table
/// of matching shape.
pub fn soft_values(
    tab: &TabularNmdp,
    demo: &DemoDistribution,
    policy_logits: &[f64],
) -> Result<SoftValues> {
    if policy_logits.len() != tab.policy_logits.len() {
        return Err(Error::config("policy logits shape mismatch"));
    }
    if demo.n_states != tab.n_states || demo.horizon != tab.horizon {
        return Err(Error::config("demo distribution shape mismatch"));
    }
    let ctx = &tab.ctx;
    let n_contexts = ctx.total();
    let mut reward = vec![f64::NEG_INFINITY; n_contexts * tab.n_states];
    let mut v = vec![0.0; n_contexts];
    let mut q = vec![0.0; n_contexts * tab.n_actions];

    let eval = |seq: &[usize]| -> Vec<f64> {
        let idx = ctx.index(seq);
        softmax(&policy_logits[idx * tab.n_actions..(idx + 1) * tab.n_actions])
    };

    // Reward table: log of the policy-averaged transition probability.
    for t in 0..tab.horizon {
        for seq in ctx.enumerate_level(t) {
            let idx = ctx.index(&seq);
            let pol = eval(&seq);
            let s = *seq.last().unwrap();
            for s_next in 0..tab.n_states {
                let mix: f64 =
                    (0..tab.n_actions).map(|a| pol[a] * tab.trans_prob(s, a, s_next)).sum();
                reward[idx * tab.n_states + s_next] = mix.ln();
            }
        }
    }

    // Backward induction. Terminal histories (length horizon + 1) have value
    // zero by definition and are not stored.
    for t in (0..tab.horizon).rev() {
        for seq in ctx.enumerate_level(t) {
            let idx = ctx.index(&seq);
            let cond = demo.conditional(&seq);
            let mut val = 0.0;
            for s_next in 0..tab.n_states {
                let p = cond[s_next];
                if p == 0.0 {
                    continue; // unreachable continuation contributes nothing
                }
                let mut term = reward[idx * tab.n_states + s_next];
                if t + 1 < tab.horizon {
                    let mut next_seq = seq.clone();
                    next_seq.push(s_next);
                    term += v[ctx.index(&next_seq)];
                }
                val += p * term;
            }
            v[idx] = val;
            let pol = eval(&seq);
            for a in 0..tab.n_actions {
                // Expectation of (log policy + reward + continuation value):
                // the log-policy term is constant in s_next.
                let mut qa = 0.0;
                for s_next in 0..tab.n_states {
                    let p = cond[s_next];
                    if p == 0.0 {
                        continue;
                    }
                    let mut term = pol[a].ln() + reward[idx * tab.n_states + s_next];
                    if t + 1 < tab.horizon {
                        let mut next_seq = seq.clone();
                        next_seq.push(s_next);
                        term += v[ctx.index(&next_seq)];
                    }
                    qa += p * term;
                }
                q[idx * tab.n_actions + a] = qa;
            }
        }
    }

    Ok(SoftValues { n_actions: tab.n_actions, n_states: tab.n_states, reward, v, q })
}

/// Deviations of the optimality identities, evaluated with `tab`'s own
/// policy against `demo` (which should be the marginal of a teacher sharing
/// `tab`'s kernel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// `max |Q(a; ctx) - V(ctx) - log policy(a | ctx)|`.
    pub q_minus_v_dev: f64,
    /// `max |reward(ctx, s') - log demo-conditional(s' | ctx)|`; zero when
    /// the evaluated policy is the one that generated the demos.
    pub reward_consistency_dev: f64,
    /// Entropy decomposition of the expected return: executing the policy
    /// loses exactly the accumulated action entropies relative to `V`.
    pub entropy_decomposition_dev: f64,
}

impl TheoremReport {
    pub fn worst(&self) -> f64 {
        self.q_minus_v_dev.max(self.reward_consistency_dev).max(self.entropy_decomposition_dev)
    }
}

pub fn theorem_identities(tab: &TabularNmdp, demo: &DemoDistribution) -> Result<TheoremReport> {
    let sv = soft_values(tab, demo, &tab.policy_logits)?;
    let ctx = &tab.ctx;

    // (i) Q - V = log policy, entrywise.
    let mut q_minus_v_dev = 0.0_f64;
    for t in 0..tab.horizon {
        for seq in ctx.enumerate_level(t) {
            let idx = ctx.index(&seq);
            let pol = tab.policy_probs(&seq);
            for a in 0..tab.n_actions {
                let dev = (sv.q[idx * tab.n_actions + a] - sv.v[idx] - pol[a].ln()).abs();
                q_minus_v_dev = q_minus_v_dev.max(dev);
            }
        }
    }

    // Reward consistency: at the demo-generating policy, the log prior
    // predictive is the demo conditional itself.
    let mut reward_consistency_dev = 0.0_f64;
    for t in 0..tab.horizon {
        for seq in ctx.enumerate_level(t) {
            let idx = ctx.index(&seq);
            let cond = demo.conditional(&seq);
            for s_next in 0..tab.n_states {
                let r = sv.reward[idx * tab.n_states + s_next];
                let target = cond[s_next].ln();
                let dev = if r == f64::NEG_INFINITY && target == f64::NEG_INFINITY {
                    0.0
                } else {
                    (r - target).abs()
                };
                reward_consistency_dev = reward_consistency_dev.max(dev);
            }
        }
    }

    // (ii) Expected return of executing the policy vs V minus entropies.
    // W is the recursive expected return where every future step also draws
    // from the policy, accumulating one log-policy term per step.
    let mut w = vec![0.0; ctx.total()];
    for t in (0..tab.horizon).rev() {
        for seq in ctx.enumerate_level(t) {
            let idx = ctx.index(&seq);
            let pol = tab.policy_probs(&seq);
            let cond = demo.conditional(&seq);
            let mut val = 0.0;
            for a in 0..tab.n_actions {
                let mut qa = pol[a].ln();
                for s_next in 0..tab.n_states {
                    let p = cond[s_next];
                    if p == 0.0 {
                        continue;
                    }
                    let mut term = sv.reward[idx * tab.n_states + s_next];
                    if t + 1 < tab.horizon {
                        let mut next_seq = seq.clone();
                        next_seq.push(s_next);
                        term += w[ctx.index(&next_seq)];
                    }
                    qa += p * term;
                }
                val += pol[a] * qa;
            }
            w[idx] = val;
        }
    }

    let entropy = |seq: &[usize]| -> f64 {
        let pol = tab.policy_probs(seq);
        -pol.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    };

    let mut entropy_decomposition_dev = 0.0_f64;
    for t in 0..tab.horizon {
        for seq in ctx.enumerate_level(t) {
            let idx = ctx.index(&seq);
            // Expected entropies of future decisions, weighted by the demo
            // probability of reaching each future history.
            let mut entropy_sum = entropy(&seq);
            let mut frontier: Vec<(Vec<usize>, f64)> = vec![(seq.clone(), 1.0)];
            for _k in (t + 1)..tab.horizon {
                let mut next_frontier = Vec::new();
                for (prefix, prob) in &frontier {
                    let cond = demo.conditional(prefix);
                    for s_next in 0..tab.n_states {
                        let p = cond[s_next];
                        if p == 0.0 {
                            continue;
                        }
                        let mut ext = prefix.clone();
                        ext.push(s_next);
                        next_frontier.push((ext, prob * p));
                    }
                }
                for (prefix, prob) in &next_frontier {
                    entropy_sum += prob * entropy(prefix);
                }
                frontier = next_frontier;
            }
            let rhs = sv.v[idx] - entropy_sum;
            entropy_decomposition_dev = entropy_decomposition_dev.max((w[idx] - rhs).abs());
        }
    }

    Ok(TheoremReport { q_minus_v_dev, reward_consistency_dev, entropy_decomposition_dev })
}

// ---------------------------------------------------------------------------
// Soft Q iteration
// ---------------------------------------------------------------------------

/// Result of running soft-Q backward sweeps on the decision problem whose
/// reward is built from the teacher's demo conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQResult {
    /// Converged Q table, `n_contexts x n_actions`.
    pub q: Vec<f64>,
    /// Softmax of Q per context.
    pub induced_policy: Vec<f64>,
    /// Max table change per sweep, in order.
    pub sweep_changes: Vec<f64>,
    pub converged: bool,
}

/// Alternates the Q backup (expectation of reward plus soft value under the
/// exact demo conditionals) with the log-sum-exp soft value until the table
/// stops changing. On a finite horizon one backward sweep reaches the fixed
/// point; further sweeps verify idempotence.
pub fn soft_q_iteration(
    tab: &TabularNmdp,
    demo: &DemoDistribution,
    max_sweeps: usize,
) -> Result<SoftQResult> {
    if max_sweeps == 0 {
        return Err(Error::config("need at least one sweep"));
    }
    if demo.n_states != tab.n_states || demo.horizon != tab.horizon {
        return Err(Error::config("demo distribution shape mismatch"));
    }
    let ctx = &tab.ctx;
    let mut q = vec![0.0; ctx.total() * tab.n_actions];
    let mut sweep_changes = Vec::new();
    let mut converged = false;

    for _sweep in 0..max_sweeps {
        let mut change = 0.0_f64;
        for t in (0..tab.horizon).rev() {
            for seq in ctx.enumerate_level(t) {
                let idx = ctx.index(&seq);
                let pol = tab.policy_probs(&seq);
                let cond = demo.conditional(&seq);
                for a in 0..tab.n_actions {
                    let mut backup = 0.0;
                    for s_next in 0..tab.n_states {
                        let p = cond[s_next];
                        if p == 0.0 {
                            continue;
                        }
                        // Reward: log demo conditional plus log teacher
                        // policy; continuation via the soft value.
                        let mut term = p.ln() + pol[a].ln();
                        if t + 1 < tab.horizon {
                            let mut next_seq = seq.clone();
                            next_seq.push(s_next);
                            let nidx = ctx.index(&next_seq);
                            term += log_sum_exp(
                                &q[nidx * tab.n_actions..(nidx + 1) * tab.n_actions],
                            );
                        }
                        backup += p * term;
                    }
                    let slot = &mut q[idx * tab.n_actions + a];
                    change = change.max((backup - *slot).abs());
                    *slot = backup;
                }
            }
        }
        sweep_changes.push(change);
        if change < SOFT_Q_TOL {
            converged = true;
            break;
        }
    }

    let mut induced_policy = vec![0.0; q.len()];
    for c in 0..ctx.total() {
        let row = softmax(&q[c * tab.n_actions..(c + 1) * tab.n_actions]);
        induced_policy[c * tab.n_actions..(c + 1) * tab.n_actions].copy_from_slice(&row);
    }
    Ok(SoftQResult { q, induced_policy, sweep_changes, converged })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-context total variation between two policy tables; max over contexts.
pub fn max_policy_tv(n_actions: usize, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0_f64;
    for c in 0..a.len() / n_actions {
        let tv: f64 = (0..n_actions)
            .map(|i| (a[c * n_actions + i] - b[c * n_actions + i]).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    worst
}

// ---------------------------------------------------------------------------
// Exact maximum-likelihood fitting
// ---------------------------------------------------------------------------

/// Fits student policy logits to a teacher's sequence distribution by exact
/// gradient ascent on the expected log marginal. The student shares the
/// teacher's kernel and initial distribution; only the logits move.
pub fn fit_policy_mle(
    teacher: &TabularNmdp,
    init_logits: Vec<f64>,
    steps: usize,
    lr: f64,
) -> Result<TabularNmdp> {
    let demo = DemoDistribution::from_model(teacher);
    let mut student = TabularNmdp::new(
        teacher.n_states,
        teacher.n_actions,
        teacher.horizon,
        teacher.initial.clone(),
        teacher.transition.clone(),
        init_logits,
    )?;
    let seqs: Vec<(Vec<usize>, f64)> = teacher
        .enumerate_state_seqs()
        .into_iter()
        .map(|s| {
            let p = demo.seq_marginal(&s);
            (s, p)
        })
        .filter(|(_, p)| *p > 0.0)
        .collect();

    for _ in 0..steps {
        let mut grad = vec![0.0; student.policy_logits.len()];
        for (seq, p) in &seqs {
            let g = exact_policy_gradient(&student, seq)?;
            for (gi, gv) in grad.iter_mut().zip(&g) {
                *gi += p * gv;
            }
        }
        for (l, g) in student.policy_logits.iter_mut().zip(&grad) {
            *l += lr * g;
        }
    }
    Ok(student)
}

/// Total variation between the full sequence marginals of two models over
/// the same spaces.
pub fn sequence_marginal_tv(a: &TabularNmdp, b: &TabularNmdp) -> Result<f64> {
    if a.n_states != b.n_states || a.horizon != b.horizon {
        return Err(Error::config("models live on different spaces"));
    }
    let da = DemoDistribution::from_model(a);
    let db = DemoDistribution::from_model(b);
    let mut tv = 0.0;
    for seq in a.enumerate_state_seqs() {
        tv += (da.seq_marginal(&seq) - db.seq_marginal(&seq)).abs();
    }
    Ok(tv / 2.0)
}

// ---------------------------------------------------------------------------
// Monte-Carlo analogues of the continuous estimators
// ---------------------------------------------------------------------------

/// Samples the per-step action posterior the way the continuous pipeline
/// does: draw prior actions, weight by the transition likelihood of the
/// observed next state, self-normalize (shared normalization code), and
/// accumulate weight mass per action.
pub fn mc_per_step_posterior(
    tab: &TabularNmdp,
    state_seq: &[usize],
    t: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    tab.check_seq(state_seq)?;
    if t + 1 >= state_seq.len() {
        return Err(Error::config("step index beyond the sequence"));
    }
    if n < 2 {
        return Err(Error::config("need at least 2 samples"));
    }
    let prior = tab.policy_probs(&state_seq[..=t]);
    let actions: Vec<usize> = (0..n).map(|_| sample_categorical(&prior, rng)).collect();
    let log_w: Vec<f64> =
        actions.iter().map(|&a| tab.trans_prob(state_seq[t], a, state_seq[t + 1]).ln()).collect();
    let weights = normalize_log_weights(&log_w)?;
    let mut mass = vec![0.0; tab.n_actions];
    for (&a, &w) in actions.iter().zip(&weights) {
        mass[a] += w;
    }
    Ok(mass)
}

/// Monte-Carlo policy-gradient estimate for one state sequence, mirroring
/// the importance-weighted contrastive estimator: per step, posterior-
/// weighted action frequencies minus plain prior frequencies, on a shared
/// sample set. Returned in the same layout as [`exact_policy_gradient`].
pub fn mc_policy_gradient(
    tab: &TabularNmdp,
    state_seq: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    tab.check_seq(state_seq)?;
    if n < 2 {
        return Err(Error::config("need at least 2 samples"));
    }
    let mut grad = vec![0.0; tab.n_contexts() * tab.n_actions];
    for t in 0..state_seq.len() - 1 {
        let ctx_idx = tab.ctx.index(&state_seq[..=t]);
        let prior = tab.policy_probs(&state_seq[..=t]);
        let actions: Vec<usize> = (0..n).map(|_| sample_categorical(&prior, rng)).collect();
        let log_w: Vec<f64> = actions
            .iter()
            .map(|&a| tab.trans_prob(state_seq[t], a, state_seq[t + 1]).ln())
            .collect();
        let weights = normalize_log_weights(&log_w)?;
        for (&a, &w) in actions.iter().zip(&weights) {
            grad[ctx_idx * tab.n_actions + a] += w;
        }
        for &a in &actions {
            grad[ctx_idx * tab.n_actions + a] -= 1.0 / n as f64;
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Instance files and the verification suite
// ---------------------------------------------------------------------------

/// On-disk form of a tabular instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub initial: Vec<f64>,
    /// `[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// One row of logits per flat context index.
    pub policy_logits: Vec<Vec<f64>>,
}

impl InstanceFile {
    pub fn from_model(tab: &TabularNmdp) -> Self {
        let mut transition = Vec::with_capacity(tab.n_states);
        for s in 0..tab.n_states {
            let mut per_action = Vec::with_capacity(tab.n_actions);
            for a in 0..tab.n_actions {
                per_action.push(
                    tab.transition[(s * tab.n_actions + a) * tab.n_states..][..tab.n_states]
                        .to_vec(),
                );
            }
            transition.push(per_action);
        }
        let policy_logits = (0..tab.n_contexts())
            .map(|c| tab.policy_logits[c * tab.n_actions..(c + 1) * tab.n_actions].to_vec())
            .collect();
        InstanceFile {
            version: INSTANCE_FORMAT_VERSION,
            n_states: tab.n_states,
            n_actions: tab.n_actions,
            horizon: tab.horizon,
            initial: tab.initial.clone(),
            transition,
            policy_logits,
        }
    }

    pub fn into_model(self) -> Result<TabularNmdp> {
        if self.version != INSTANCE_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported instance version {} (expected {INSTANCE_FORMAT_VERSION})",
                self.version
            )));
        }
        let transition: Vec<f64> =
            self.transition.into_iter().flatten().flatten().collect();
        let policy_logits: Vec<f64> = self.policy_logits.into_iter().flatten().collect();
        TabularNmdp::new(
            self.n_states,
            self.n_actions,
            self.horizon,
            self.initial,
            transition,
            policy_logits,
        )
    }
}

/// One named check with its worst observed deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub instances: usize,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs the full identity suite over the given instances: posterior
/// factorization, importance reweighting, gradient finite differences, the
/// value identities, and soft-Q convergence/idempotence. Sequences are
/// drawn from each instance's own marginal, deterministically in `seed`.
pub fn run_verification(instances: &[TabularNmdp], seed: u64, seqs_per_instance: usize) -> Result<VerificationReport> {
    use rand_chacha::rand_core::SeedableRng;
    if instances.is_empty() {
        return Err(Error::empty("instance set"));
    }
    let mut factorization = 0.0_f64;
    let mut importance = 0.0_f64;
    let mut grad_fd = 0.0_f64;
    let mut theorem = 0.0_f64;
    let mut soft_q_tv = 0.0_f64;
    let mut soft_q_idem = 0.0_f64;

    for (i, tab) in instances.iter().enumerate() {
        let demo = DemoDistribution::from_model(tab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        for _ in 0..seqs_per_instance {
            let seq = demo.sample_sequence(&mut rng);
            factorization = factorization.max(posterior_factorization_check(tab, &seq)?);
            importance = importance.max(importance_identity_check(tab, &seq)?);
        }
        // Gradient check on one sampled sequence per instance.
        let seq = demo.sample_sequence(&mut rng);
        let exact = exact_policy_gradient(tab, &seq)?;
        let fd = fd_log_marginal_grad(tab, &seq, 1e-5)?;
        for (e, f) in exact.iter().zip(&fd) {
            let rel = (e - f).abs() / f64::max(1.0, e.abs().max(f.abs()));
            grad_fd = grad_fd.max(rel);
        }
        theorem = theorem.max(theorem_identities(tab, &demo)?.worst());

        let sq = soft_q_iteration(tab, &demo, 3)?;
        let sv = soft_values(tab, &demo, &tab.policy_logits)?;
        let mut exact_induced = vec![0.0; sv.q.len()];
        for c in 0..tab.n_contexts() {
            let row = softmax(&sv.q[c * tab.n_actions..(c + 1) * tab.n_actions]);
            exact_induced[c * tab.n_actions..(c + 1) * tab.n_actions].copy_from_slice(&row);
        }
        soft_q_tv = soft_q_tv.max(max_policy_tv(tab.n_actions, &sq.induced_policy, &exact_induced));
        if sq.sweep_changes.len() > 1 {
            soft_q_idem = soft_q_idem.max(sq.sweep_changes[1]);
        }
    }

    let checks = vec![
        CheckResult {
            name: "posterior_factorization".into(),
            worst: factorization,
            tolerance: FACTORIZATION_TOL,
            pass: factorization < FACTORIZATION_TOL,
        },
        CheckResult {
            name: "importance_reweighting".into(),
            worst: importance,
            tolerance: IMPORTANCE_TOL,
            pass: importance < IMPORTANCE_TOL,
        },
        CheckResult {
            name: "policy_gradient_fd".into(),
            worst: grad_fd,
            tolerance: GRADIENT_FD_RELTOL,
            pass: grad_fd < GRADIENT_FD_RELTOL,
        },
        CheckResult {
            name: "value_identities".into(),
            worst: theorem,
            tolerance: THEOREM_TOL,
            pass: theorem < THEOREM_TOL,
        },
        CheckResult {
            name: "soft_q_induced_policy".into(),
            worst: soft_q_tv,
            tolerance: SOFT_Q_TV_TOL,
            pass: soft_q_tv < SOFT_Q_TV_TOL,
        },
        CheckResult {
            name: "soft_q_idempotence".into(),
            worst: soft_q_idem,
            tolerance: SOFT_Q_IDEMPOTENT_TOL,
            pass: soft_q_idem < SOFT_Q_IDEMPOTENT_TOL,
        },
    ];
    Ok(VerificationReport { instances: instances.len(), checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    /// Two states, two actions, deterministic transition: action i moves to
    /// state i regardless of the current state.
    fn switch_instance(horizon: usize, logits: f64) -> TabularNmdp {
        let n_states = 2;
        let n_actions = 2;
        // transition[(s, a)] puts all mass on s' = a.
        let mut transition = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                transition[(s * n_actions + a) * n_states + a] = 1.0;
            }
        }
        let ctx = ContextIndex::new(n_states, horizon);
        let mut policy_logits = vec![0.0; ctx.total() * n_actions];
        for row in policy_logits.chunks_mut(n_actions) {
            row[1] = logits;
        }
        TabularNmdp::new(n_states, n_actions, horizon, vec![0.6, 0.4], transition, policy_logits)
            .unwrap()
    }

    #[test]
    fn context_index_round_trips() {
        let ctx = ContextIndex::new(3, 4);
        assert_eq!(ctx.total(), 3 + 9 + 27 + 81);
        for idx in 0..ctx.total() {
            let seq = ctx.decode(idx);
            assert_eq!(ctx.index(&seq), idx);
        }
        assert_eq!(ctx.level_count(0), 3);
        assert_eq!(ctx.level_count(3), 81);
        assert_eq!(ctx.enumerate_level(1).len(), 9);
    }

    #[test]
    fn constructor_validates_rows_and_caps() {
        assert!(TabularNmdp::random(0, 3, 2, 2).is_ok());
        assert!(TabularNmdp::random(0, 9, 2, 2).is_err());
        assert!(TabularNmdp::random(0, 3, 2, 5).is_err());
        let bad = TabularNmdp::new(
            2,
            1,
            1,
            vec![0.5, 0.6],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn deterministic_single_action_marginal_is_initial_log_prob() {
        // One action, deterministic cycle 0 -> 1 -> 0.
        let transition = vec![
            0.0, 1.0, // s=0
            1.0, 0.0, // s=1
        ];
        let ctx = ContextIndex::new(2, 2);
        let tab = TabularNmdp::new(
            2,
            1,
            2,
            vec![0.3, 0.7],
            transition,
            vec![0.0; ctx.total()],
        )
        .unwrap();
        let lm = exact_log_marginal(&tab, &[0, 1, 0]).unwrap();
        assert!((lm - 0.3_f64.ln()).abs() < 1e-14);
        // Inconsistent sequence has zero probability.
        assert_eq!(exact_log_marginal(&tab, &[0, 0, 1]).unwrap(), f64::NEG_INFINITY);
    }

    /// The enumerated marginal factorizes over steps; computing it the other
    /// way (product of per-step policy-averaged transitions) must agree.
    #[test]
    fn marginal_matches_factorized_computation() {
        for seed in 0..10 {
            let tab = TabularNmdp::random(seed, 3, 3, 3).unwrap();
            let demo = DemoDistribution::from_model(&tab);
            for seq in [vec![0, 1, 2, 0], vec![2, 2, 1, 0], vec![1, 0, 0, 2]] {
                let by_enum = exact_log_marginal(&tab, &seq).unwrap();
                let by_steps = demo.seq_marginal(&seq).ln();
                assert!(
                    (by_enum - by_steps).abs() < 1e-12,
                    "enumeration {by_enum} vs factorized {by_steps}"
                );
            }
        }
    }

    #[test]
    fn posterior_factorizes_exactly() {
        for seed in 0..20 {
            let tab = TabularNmdp::random(seed, 3, 2, 3).unwrap();
            let demo = DemoDistribution::from_model(&tab);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = demo.sample_sequence(&mut rng);
            let dev = posterior_factorization_check(&tab, &seq).unwrap();
            assert!(dev < FACTORIZATION_TOL, "deviation {dev}");
        }
    }

    #[test]
    fn uniform_everything_gives_uniform_posterior() {
        // Uniform policy, uniform transition, one step: every action
        // explains the observation equally well.
        let tab = TabularNmdp::new(
            2,
            2,
            1,
            vec![0.5, 0.5],
            vec![0.5; 8],
            vec![0.0; 4],
        )
        .unwrap();
        let post = exact_posterior(&tab, &[0, 1]).unwrap();
        assert!((post.per_step[0][0] - 0.5).abs() < 1e-15);
        assert!((post.per_step[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deterministic_transition_gives_one_hot_posterior() {
        let tab = switch_instance(2, 0.4);
        let post = exact_posterior(&tab, &[0, 1, 0]).unwrap();
        assert!((post.per_step[0][1] - 1.0).abs() < 1e-15); // only action 1 reaches state 1
        assert!((post.per_step[1][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_rejects_impossible_sequences() {
        // Deterministic cycle with one action cannot stay in place.
        let transition = vec![0.0, 1.0, 1.0, 0.0];
        let ctx = ContextIndex::new(2, 1);
        let tab =
            TabularNmdp::new(2, 1, 1, vec![1.0, 0.0], transition, vec![0.0; ctx.total()]).unwrap();
        assert!(exact_posterior(&tab, &[0, 0]).is_err());
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let tab = TabularNmdp::random(seed, 3, 2, 2).unwrap();
            let demo = DemoDistribution::from_model(&tab);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let seq = demo.sample_sequence(&mut rng);
            let exact = exact_policy_gradient(&tab, &seq).unwrap();
            let fd = fd_log_marginal_grad(&tab, &seq, 1e-5).unwrap();
            for (e, f) in exact.iter().zip(&fd) {
                let rel = (e - f).abs() / f64::max(1.0, e.abs().max(f.abs()));
                assert!(rel < GRADIENT_FD_RELTOL, "exact {e} vs fd {f}");
            }
        }
    }

    /// Adding a per-context constant to the logits changes no probability,
    /// hence no gradient.
    #[test]
    fn policy_gradient_is_shift_invariant() {
        let tab = TabularNmdp::random(3, 3, 2, 2).unwrap();
        let mut shifted = tab.clone();
        for c in 0..shifted.n_contexts() {
            for a in 0..shifted.n_actions {
                shifted.policy_logits[c * shifted.n_actions + a] += 7.5;
            }
        }
        let seq = vec![0, 1, 2];
        let g0 = exact_policy_gradient(&tab, &seq).unwrap();
        let g1 = exact_policy_gradient(&shifted, &seq).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_identity_holds_exactly() {
        for seed in 0..20 {
            let tab = TabularNmdp::random(seed, 3, 2, 3).unwrap();
            let demo = DemoDistribution::from_model(&tab);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let seq = demo.sample_sequence(&mut rng);
            let dev = importance_identity_check(&tab, &seq).unwrap();
            assert!(dev < IMPORTANCE_TOL, "deviation {dev}");
        }
    }

    #[test]
    fn demo_distribution_matches_enumeration() {
        let tab = TabularNmdp::random(11, 3, 3, 2).unwrap();
        let demo = DemoDistribution::from_model(&tab);
        let mut total = 0.0;
        for seq in tab.enumerate_state_seqs() {
            let lm = exact_log_marginal(&tab, &seq).unwrap();
            let p = demo.seq_marginal(&seq);
            assert!((lm.exp() - p).abs() < 1e-13);
            total += p;
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    /// Backward-induction V must equal the direct path-sum definition: the
    /// expected total reward over enumerated futures.
    #[test]
    fn values_match_path_enumeration() {
        let tab = TabularNmdp::random(5, 2, 2, 3).unwrap();
        let demo = DemoDistribution::from_model(&tab);
        let sv = soft_values(&tab, &demo, &tab.policy_logits).unwrap();
        let ctx = tab.context_index().clone();
        for t in 0..tab.horizon {
            for seq in ctx.enumerate_level(t) {
                let idx = ctx.index(&seq);
                // Path sum: enumerate futures s_{t+1..T} with probabilities.
                let mut frontier: Vec<(Vec<usize>, f64, f64)> = vec![(seq.clone(), 1.0, 0.0)];
                let mut v_direct = 0.0;
                for _k in t..tab.horizon {
                    let mut next = Vec::new();
                    for (prefix, prob, acc) in &frontier {
                        let cond = demo.conditional(prefix);
                        let ridx = ctx.index(prefix);
                        for s_next in 0..tab.n_states {
                            let p = cond[s_next];
                            if p == 0.0 {
                                continue;
                            }
                            let r = sv.reward[ridx * tab.n_states + s_next];
                            let mut ext = prefix.clone();
                            ext.push(s_next);
                            next.push((ext, prob * p, acc + r));
                        }
                    }
                    frontier = next;
                }
                for (_, prob, acc) in &frontier {
                    v_direct += prob * acc;
                }
                assert!(
                    (sv.v[idx] - v_direct).abs() < 1e-10,
                    "context {seq:?}: backup {} vs path sum {v_direct}",
                    sv.v[idx]
                );
            }
        }
    }

    #[test]
    fn horizon_one_decomposition_is_single_entropy() {
        let tab = TabularNmdp::random(9, 3, 3, 1).unwrap();
        let demo = DemoDistribution::from_model(&tab);
        let sv = soft_values(&tab, &demo, &tab.policy_logits).unwrap();
        // E_policy[Q] = V - H(policy) exactly at horizon 1.
        for s0 in 0..tab.n_states {
            let seq = vec![s0];
            let idx = tab.context_index().index(&seq);
            let pol = tab.policy_probs(&seq);
            let e_q: f64 =
                (0..tab.n_actions).map(|a| pol[a] * sv.q[idx * tab.n_actions + a]).sum();
            let h: f64 = -pol.iter().map(|p| p * p.ln()).sum::<f64>();
            assert!((e_q - (sv.v[idx] - h)).abs() < 1e-12);
        }
    }

    #[test]
    fn theorem_identities_hold_on_random_instances() {
        for seed in 0..10 {
            let tab = TabularNmdp::random(seed, 3, 2, 3).unwrap();
            let demo = DemoDistribution::from_model(&tab);
            let report = theorem_identities(&tab, &demo).unwrap();
            assert!(report.q_minus_v_dev < THEOREM_TOL, "(i) dev {}", report.q_minus_v_dev);
            assert!(
                report.reward_consistency_dev < THEOREM_TOL,
                "reward dev {}",
                report.reward_consistency_dev
            );
            assert!(
                report.entropy_decomposition_dev < THEOREM_TOL,
                "(ii) dev {}",
                report.entropy_decomposition_dev
            );
        }
    }

    /// Uniform teacher policy over k actions: Q - V = -log k everywhere.
    #[test]
    fn uniform_policy_gap_is_log_k() {
        let tab = TabularNmdp::random(2, 3, 4, 2).unwrap();
        let mut uniform = tab.clone();
        for l in uniform.policy_logits.iter_mut() {
            *l = 0.0;
        }
        let demo = DemoDistribution::from_model(&uniform);
        let sv = soft_values(&uniform, &demo, &uniform.policy_logits).unwrap();
        let expect = -(4.0_f64).ln();
        for c in 0..uniform.n_contexts() {
            for a in 0..uniform.n_actions {
                let gap = sv.q[c * uniform.n_actions + a] - sv.v[c];
                assert!((gap - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_q_iteration_recovers_the_teacher() {
        for seed in 0..10 {
            let tab = TabularNmdp::random(seed, 3, 2, 3).unwrap();
            let demo = DemoDistribution::from_model(&tab);
            let result = soft_q_iteration(&tab, &demo, 3).unwrap();
            assert!(result.converged);
            // One backward sweep reaches the fixed point; the second changes
            // nothing beyond roundoff.
            assert!(result.sweep_changes.len() >= 2);
            assert!(result.sweep_changes[1] < SOFT_Q_IDEMPOTENT_TOL);

            // Induced policy == softmax(Q from soft_values) == teacher.
            let sv = soft_values(&tab, &demo, &tab.policy_logits).unwrap();
            let mut exact_induced = vec![0.0; sv.q.len()];
            for c in 0..tab.n_contexts() {
                let row = softmax(&sv.q[c * tab.n_actions..(c + 1) * tab.n_actions]);
                exact_induced[c * tab.n_actions..(c + 1) * tab.n_actions].copy_from_slice(&row);
            }
            let tv = max_policy_tv(tab.n_actions, &result.induced_policy, &exact_induced);
            assert!(tv < SOFT_Q_TV_TOL, "tv {tv}");

            let mut teacher_table = vec![0.0; sv.q.len()];
            for seq in (0..tab.horizon).flat_map(|t| tab.context_index().enumerate_level(t)) {
                let idx = tab.context_index().index(&seq);
                let row = tab.policy_probs(&seq);
                teacher_table[idx * tab.n_actions..(idx + 1) * tab.n_actions]
                    .copy_from_slice(&row);
            }
            let tv_teacher = max_policy_tv(tab.n_actions, &result.induced_policy, &teacher_table);
            assert!(tv_teacher < SOFT_Q_TV_TOL, "teacher tv {tv_teacher}");
        }
    }

    #[test]
    fn horizon_one_soft_value_is_log_sum_exp_of_q() {
        let tab = TabularNmdp::random(4, 2, 3, 1).unwrap();
        let demo = DemoDistribution::from_model(&tab);
        let result = soft_q_iteration(&tab, &demo, 2).unwrap();
        let sv = soft_values(&tab, &demo, &tab.policy_logits).unwrap();
        for s0 in 0..tab.n_states {
            let idx = tab.context_index().index(&[s0]);
            let lse = log_sum_exp(&result.q[idx * tab.n_actions..(idx + 1) * tab.n_actions]);
            // Soft value of the converged Q equals V at the teacher policy.
            assert!((lse - sv.v[idx]).abs() < 1e-10, "lse {lse} vs v {}", sv.v[idx]);
        }
    }

    #[test]
    fn gradient_ascent_recovers_teacher_marginal() {
        let teacher = TabularNmdp::random(21, 3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let init: Vec<f64> =
            (0..teacher.policy_logits.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let student = fit_policy_mle(&teacher, init, 12_000, 1.0).unwrap();
        let tv = sequence_marginal_tv(&teacher, &student).unwrap();
        assert!(tv < 1e-4, "tv {tv}");

        // The fitted policy satisfies the Q - V = log policy identity.
        let demo = DemoDistribution::from_model(&teacher);
        let sv = soft_values(&teacher, &demo, &student.policy_logits).unwrap();
        let ctx = teacher.context_index();
        for t in 0..teacher.horizon {
            for seq in ctx.enumerate_level(t) {
                let idx = ctx.index(&seq);
                let pol = student.policy_probs(&seq);
                for a in 0..teacher.n_actions {
                    let dev =
                        (sv.q[idx * teacher.n_actions + a] - sv.v[idx] - pol[a].ln()).abs();
                    assert!(dev < 1e-6, "identity dev {dev}");
                }
            }
        }
    }

    #[test]
    fn mc_posterior_converges_to_enumeration() {
        let tab = TabularNmdp::random(33, 3, 2, 2).unwrap();
        let demo = DemoDistribution::from_model(&tab);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = demo.sample_sequence(&mut rng);
        let exact = exact_posterior(&tab, &seq).unwrap();
        let mc = mc_per_step_posterior(&tab, &seq, 0, 100_000, &mut rng).unwrap();
        let tv: f64 =
            mc.iter().zip(&exact.per_step[0]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn mc_gradient_approaches_exact_gradient() {
        let tab = TabularNmdp::random(8, 3, 2, 2).unwrap();
        let demo = DemoDistribution::from_model(&tab);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let seq = demo.sample_sequence(&mut rng);
        let exact = exact_policy_gradient(&tab, &seq).unwrap();
        let mc = mc_policy_gradient(&tab, &seq, 100_000, &mut rng).unwrap();
        let num: f64 = exact.iter().zip(&mc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let den: f64 = exact.iter().map(|a| a * a).sum::<f64>();
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn instance_file_round_trips() {
        let tab = TabularNmdp::random(44, 4, 3, 2).unwrap();
        let file = InstanceFile::from_model(&tab);
        let text = serde_json::to_string(&file).unwrap();
        let parsed: InstanceFile = serde_json::from_str(&text).unwrap();
        let back = parsed.into_model().unwrap();
        assert_eq!(tab, back);
    }

    #[test]
    fn verification_report_passes_on_random_instances() {
        let instances: Vec<TabularNmdp> =
            (0..5).map(|i| TabularNmdp::random(i, 3, 2, 2).unwrap()).collect();
        let report = run_verification(&instances, 0, 3).unwrap();
        assert!(report.all_pass(), "report: {report:?}");
        assert!(run_verification(&[], 0, 3).is_err());
    }
}
