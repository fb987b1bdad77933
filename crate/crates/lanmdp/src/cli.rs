//! Command implementations behind the `lanmdp` binary: configuration
//! resolution, the six subcommands, and static SVG plots.
//!
//! Every artifact a command writes embeds the resolved [`RunConfig`] so a
//! file on disk is enough to rerun the experiment: JSON artifacts carry a
//! `config` field, CSV files a leading `#` comment, SVG files an XML
//! comment, and demo files a header field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::envs::{
    cubic_fit, curve_affine_transition, evaluate_rollouts, generate_demos, read_demos,
    shortest_path_reference, write_demos, CurveDemo, CurveEnv, CurveEnvConfig,
    EVAL_CURVINESS_MIN,
};
use crate::error::{Error, Result};
use crate::model::{
    BundleSeeds, EnergyPolicyModel, GaussianTransitionModel, ModelBundle, Transition,
    TransitionEnsemble,
};
use crate::nn::Activation;
use crate::oracle::{InstanceFile, TabularNmdp, VerificationReport};
use crate::planning::{plan_goal, plan_to_csv, execute_policy};
use crate::rng::{self, tag};
use crate::sampling::LangevinConfig;
use crate::training::{
    curve_profile, inference_sampler, segment_demos, train, EvalMetrics, PosteriorMode,
    TrainConfig,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VERIFY_FAILED: i32 = 4;

/// Master-seed fallback consulted when no `--seed` flag is given.
pub const SEED_ENV_VAR: &str = "LANMDP_SEED";

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// What the run operates on: the curve board, or a directory of tabular
/// instances for the identity suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskProfile {
    Curve,
    Tabular { instances: PathBuf },
}

/// Whether the dynamics are fitted from self-interaction or implanted as
/// the exact curve rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionSetup {
    Learned,
    Implanted,
}

/// Resolved settings for a run. Defaults reproduce the curve study; a JSON
/// config file overrides fields, and command-line flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskProfile,
    pub env: CurveEnvConfig,
    pub context_len: usize,
    /// Hidden widths of the policy energy net; empty means the
    /// conventional single layer of four times the context length.
    pub policy_hidden: Vec<usize>,
    pub policy_l2: f64,
    pub transition_setup: TransitionSetup,
    pub transition_hidden: Vec<usize>,
    pub sigma: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskProfile::Curve,
            env: CurveEnvConfig::default(),
            context_len: 4,
            policy_hidden: Vec::new(),
            policy_l2: 1e-4,
            transition_setup: TransitionSetup::Learned,
            transition_hidden: vec![32],
            sigma: 0.05,
            train: curve_profile(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.context_len == 0 {
            return Err(Error::config("context length must be at least 1"));
        }
        if self.policy_hidden.iter().chain(&self.transition_hidden).any(|&w| w == 0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("transition noise scale must be positive"));
        }
        if self.policy_l2 < 0.0 {
            return Err(Error::config("policy l2 coefficient must be non-negative"));
        }
        if let TaskProfile::Tabular { instances } = &self.task {
            if !instances.exists() {
                return Err(Error::config(format!(
                    "instance directory {} does not exist",
                    instances.display()
                )));
            }
        }
        Ok(())
    }

    pub fn policy_hidden_resolved(&self) -> Vec<usize> {
        if self.policy_hidden.is_empty() {
            vec![4 * self.context_len]
        } else {
            self.policy_hidden.clone()
        }
    }
}

/// Loads the config file when given, otherwise the defaults.
pub fn resolve_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Seed precedence: explicit flag, then the environment variable, then the
/// config value.
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| Error::config(format!("{SEED_ENV_VAR} must be an unsigned integer"))),
        Err(_) => Ok(config_seed),
    }
}

/// The reproducibility stamp embedded in every artifact.
fn artifact_echo(cfg: &RunConfig, command: &str, args: serde_json::Value) -> serde_json::Value {
    json!({ "command": command, "args": args, "config": cfg })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Fresh models per the config. The per-component init seeds are derived
/// from the master seed and recorded in the bundle.
pub fn build_models(cfg: &RunConfig) -> Result<(EnergyPolicyModel, Transition, BundleSeeds)> {
    let master = cfg.train.seed;
    let policy_seed = rng::mix(&[master, tag::POLICY_INIT]);
    let policy = EnergyPolicyModel::init(
        cfg.context_len,
        2,
        1,
        &cfg.policy_hidden_resolved(),
        Activation::Swish,
        cfg.policy_l2,
        policy_seed,
    )?;
    let (transition, transition_seeds) = match cfg.transition_setup {
        TransitionSetup::Implanted => {
            (Transition::Implanted(curve_affine_transition(&cfg.env, cfg.sigma)?), Vec::new())
        }
        TransitionSetup::Learned => {
            let seeds: Vec<u64> =
                (0..2).map(|m| rng::mix(&[master, tag::TRANSITION_INIT, m])).collect();
            let members = seeds
                .iter()
                .map(|&s| {
                    GaussianTransitionModel::init(
                        2,
                        1,
                        &cfg.transition_hidden,
                        Activation::LeakyRelu,
                        cfg.sigma,
                        s,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (Transition::Learned(TransitionEnsemble::new(members)?), seeds)
        }
    };
    let seeds =
        BundleSeeds { master, policy_init: policy_seed, transition_init: transition_seeds };
    Ok((policy, transition, seeds))
}

fn require_curve_task(cfg: &RunConfig) -> Result<()> {
    match cfg.task {
        TaskProfile::Curve => Ok(()),
        TaskProfile::Tabular { .. } => {
            Err(Error::config("this command runs on the curve task; got a tabular profile"))
        }
    }
}

// ---------------------------------------------------------------------------
// gen-demos
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenDemosArgs {
    pub config: Option<PathBuf>,
    pub n: usize,
    pub min_a: f64,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn cmd_gen_demos(args: &GenDemosArgs) -> Result<i32> {
    let mut cfg = resolve_config(args.config.as_deref())?;
    require_curve_task(&cfg)?;
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;
    if args.n == 0 {
        return Err(Error::config("demo count must be positive"));
    }

    let mut rng = rng::stream(cfg.train.seed, tag::DEMO_GEN);
    let batch = generate_demos(&cfg.env, args.n, args.min_a, &mut rng)?;
    let echo = artifact_echo(
        &cfg,
        "gen-demos",
        json!({ "n": args.n, "min_a": args.min_a, "out": args.out }),
    );
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_demos(&args.out, &cfg.env, &batch.demos, Some(echo))?;

    let mean_abs_a =
        batch.demos.iter().map(|d| d.coeffs.a.abs()).sum::<f64>() / batch.demos.len() as f64;
    println!("wrote {} demos to {}", batch.demos.len(), args.out.display());
    println!("mean |a| {:.4}, rejection ratio {:.4}", mean_abs_a, batch.rejection_ratio());
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub demos: PathBuf,
    pub context: Option<usize>,
    pub steps: Option<u64>,
    pub mode: Option<PosteriorMode>,
    pub transition: Option<TransitionSetup>,
    pub seed: Option<u64>,
    pub out_bundle: PathBuf,
    pub out_metrics: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let mut cfg = resolve_config(args.config.as_deref())?;
    require_curve_task(&cfg)?;
    if let Some(l) = args.context {
        cfg.context_len = l;
    }
    if let Some(n) = args.steps {
        cfg.train.iterations = n;
    }
    if let Some(mode) = args.mode {
        cfg.train.posterior_mode = mode;
    }
    if let Some(setup) = args.transition {
        cfg.transition_setup = setup;
    }
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;
    cfg.validate()?;

    let (demo_env, demos) = read_demos(&args.demos)?;
    if demo_env != cfg.env {
        return Err(Error::config(format!(
            "demo file was generated for a different board ({demo_env:?} vs {:?})",
            cfg.env
        )));
    }
    let trajectories: Vec<Vec<Vec<f64>>> = demos.iter().map(|d| d.points.clone()).collect();
    let dataset = segment_demos(&trajectories, cfg.context_len)?;

    let (policy, transition, seeds) = build_models(&cfg)?;
    let env = CurveEnv::new(cfg.env)?;
    let eval_sampler = inference_sampler(&cfg.train.sampler, cfg.train.eval_noise);
    let master = cfg.train.seed;
    let eval_rollouts = cfg.train.eval_rollouts;
    let evaluator = |policy: &EnergyPolicyModel, _transition: &Transition, step: u64| {
        let metrics = curve_eval(policy, &env, &eval_sampler, eval_rollouts, master, step);
        let residual =
            metrics.mean_residual.map(|r| format!("{r:.5}")).unwrap_or_else(|| "-".into());
        println!("step {step}: acceptance {:.3}, residual {residual}", metrics.acceptance_rate);
        metrics
    };

    let result = train(policy, transition, &dataset, &env, &cfg.train, seeds, evaluator)?;

    let echo = artifact_echo(
        &cfg,
        "train",
        json!({ "demos": args.demos, "out_bundle": args.out_bundle, "out_metrics": args.out_metrics }),
    );
    let mut bundle = result.bundle;
    bundle.config = Some(echo.clone());
    write_text(&args.out_bundle, &bundle.to_json())?;
    write_text(&args.out_metrics, &result.metrics.to_csv(Some(&echo.to_string())))?;
    println!(
        "wrote {} and {}",
        args.out_bundle.display(),
        args.out_metrics.display()
    );

    if let Some(step) = result.diverged_at {
        println!("training diverged at step {step}; kept the last clean checkpoint");
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

/// Rolls out the policy and scores the rollouts; sampling failures count
/// as a zero-acceptance evaluation rather than aborting the run.
fn curve_eval(
    policy: &EnergyPolicyModel,
    env: &CurveEnv,
    sampler: &LangevinConfig,
    n: usize,
    master: u64,
    step: u64,
) -> EvalMetrics {
    let mut rng = rng::substream(master, tag::EVAL, step, 0);
    let mut rollouts = Vec::with_capacity(n);
    for _ in 0..n {
        match execute_policy(policy, env, sampler, &mut rng) {
            Ok(states) => rollouts.push(states),
            Err(_) => return EvalMetrics { acceptance_rate: 0.0, mean_residual: None },
        }
    }
    match evaluate_rollouts(&rollouts, EVAL_CURVINESS_MIN) {
        Ok(eval) => EvalMetrics {
            acceptance_rate: eval.acceptance_rate,
            mean_residual: eval.mean_residual,
        },
        Err(_) => EvalMetrics { acceptance_rate: 0.0, mean_residual: None },
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub model: PathBuf,
    pub n: usize,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajectoryReport {
    coeffs: [f64; 4],
    residual: f64,
    accepted: bool,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let mut cfg = resolve_config(args.config.as_deref())?;
    require_curve_task(&cfg)?;
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;
    if let Some(noise) = args.noise {
        cfg.train.eval_noise = noise;
    }
    if args.n == 0 {
        return Err(Error::config("rollout count must be positive"));
    }

    let bundle = ModelBundle::load(&args.model)?;
    let env = CurveEnv::new(cfg.env)?;
    let sampler = inference_sampler(&cfg.train.sampler, cfg.train.eval_noise);
    let mut rng = rng::stream(cfg.train.seed, tag::EVAL);

    let mut rollouts = Vec::with_capacity(args.n);
    for _ in 0..args.n {
        rollouts.push(execute_policy(&bundle.policy, &env, &sampler, &mut rng)?);
    }
    let eval = evaluate_rollouts(&rollouts, EVAL_CURVINESS_MIN)?;
    let trajectories: Vec<TrajectoryReport> = rollouts
        .iter()
        .map(|states| {
            let (coeffs, residual) = cubic_fit(states)?;
            Ok(TrajectoryReport {
                coeffs: [coeffs.a, coeffs.b, coeffs.c, coeffs.d],
                residual,
                accepted: coeffs.a.abs() > EVAL_CURVINESS_MIN,
            })
        })
        .collect::<Result<_>>()?;

    let echo = artifact_echo(
        &cfg,
        "eval",
        json!({ "model": args.model, "n": args.n, "out": args.out }),
    );
    let report = json!({
        "config": echo,
        "n": args.n,
        "acceptance_rate": eval.acceptance_rate,
        "mean_residual": eval.mean_residual,
        "n_accepted": eval.n_accepted,
        "trajectories": trajectories,
    });
    write_text(&args.out, &serde_json::to_string_pretty(&report)?)?;

    let residual =
        eval.mean_residual.map(|r| format!("{r:.5}")).unwrap_or_else(|| "-".into());
    println!(
        "acceptance {:.3} ({}/{}), residual {residual}",
        eval.acceptance_rate, eval.n_accepted, args.n
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlanArgs {
    pub config: Option<PathBuf>,
    pub model: PathBuf,
    /// States as "x,y;x,y;..." ending at the current state.
    pub prefix: String,
    /// Goal state as "x,y".
    pub goal: String,
    pub steps: Option<usize>,
    pub noise: f64,
    pub seed: Option<u64>,
    pub out_csv: PathBuf,
    pub out_summary: PathBuf,
}

fn parse_state_list(text: &str, dim: usize) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|chunk| {
            let coords = chunk
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::format(format!("bad coordinate {c:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if coords.len() != dim {
                return Err(Error::format(format!(
                    "state {chunk:?} has {} coordinates, expected {dim}",
                    coords.len()
                )));
            }
            Ok(coords)
        })
        .collect()
}

/// Cubic-fit summary of a path, embedded in plan and eval reports.
fn fit_report(states: &[Vec<f64>]) -> Option<TrajectoryReport> {
    let (coeffs, residual) = cubic_fit(states).ok()?;
    Some(TrajectoryReport {
        coeffs: [coeffs.a, coeffs.b, coeffs.c, coeffs.d],
        residual,
        accepted: coeffs.a.abs() > EVAL_CURVINESS_MIN,
    })
}

pub fn cmd_plan(args: &PlanArgs) -> Result<i32> {
    let mut cfg = resolve_config(args.config.as_deref())?;
    require_curve_task(&cfg)?;
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;

    let bundle = ModelBundle::load(&args.model)?;
    let prefix = parse_state_list(&args.prefix, 2)?;
    let goal_state = {
        let parsed = parse_state_list(&args.goal, 2)?;
        if parsed.len() != 1 {
            return Err(Error::format("goal must be a single x,y state"));
        }
        parsed.into_iter().next().unwrap()
    };

    // Default horizon: one action per grid column left of the right edge.
    let steps = match args.steps {
        Some(s) => s,
        None => {
            let x_now = prefix.last().unwrap()[0];
            let remaining = ((cfg.env.x_range.1 - x_now) / cfg.env.h).round() as i64;
            if remaining < 1 {
                return Err(Error::config(
                    "prefix already sits at the right edge; pass an explicit step count",
                ));
            }
            remaining as usize
        }
    };

    let sampler = inference_sampler(&cfg.train.sampler, args.noise);
    let mut rng = rng::stream(cfg.train.seed, tag::PLAN);
    let plan = plan_goal(
        &bundle.policy,
        &bundle.transition,
        &prefix,
        &goal_state,
        steps,
        &sampler,
        &mut rng,
    )?;

    // The straight alternative, for side-by-side comparison.
    let current = prefix.last().unwrap().clone();
    let reference_actions = shortest_path_reference(current[1], goal_state[1], steps);
    let mut reference_states = vec![current.clone()];
    for a in &reference_actions {
        let last = reference_states.last().unwrap();
        reference_states.push(vec![last[0] + cfg.env.h, last[1] + a[0]]);
    }

    let mut planned_path = vec![current];
    planned_path.extend(plan.predicted_states.iter().cloned());

    let echo = artifact_echo(
        &cfg,
        "plan",
        json!({
            "model": args.model,
            "prefix": args.prefix,
            "goal": args.goal,
            "steps": steps,
            "noise": args.noise,
        }),
    );
    write_text(&args.out_csv, &plan_to_csv(&plan, Some(&echo.to_string())))?;
    let summary = json!({
        "config": echo,
        "goal": plan.goal,
        "steps": steps,
        "residual_to_goal": plan.residual_to_goal,
        "used_uniform_init": plan.used_uniform_init,
        "actions": plan.actions,
        "predicted_states": plan.predicted_states,
        "planned_fit": fit_report(&planned_path),
        "reference_states": reference_states,
        "reference_fit": fit_report(&reference_states),
    });
    write_text(&args.out_summary, &serde_json::to_string_pretty(&summary)?)?;

    println!(
        "planned {steps} steps, landing {:.4} from the goal",
        plan.residual_to_goal
    );
    println!("wrote {} and {}", args.out_csv.display(), args.out_summary.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub config: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub seqs: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Instances shipped with the binary: a spread of shapes over the
/// enumerable regime, generated from pinned seeds.
pub fn bundled_instances() -> Vec<TabularNmdp> {
    [
        (0xA1, 3, 2, 2),
        (0xA2, 2, 2, 4),
        (0xA3, 4, 3, 3),
        (0xA4, 5, 4, 2),
        (0xA5, 6, 5, 2),
        (0xA6, 3, 3, 4),
    ]
    .into_iter()
    .map(|(seed, s, a, t)| {
        TabularNmdp::random(seed, s, a, t).expect("bundled instance dims are valid")
    })
    .collect()
}

fn load_instance_dir(dir: &Path) -> Result<Vec<TabularNmdp>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no instance files (*.json) in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            let file: InstanceFile = serde_json::from_str(&text)?;
            file.into_model().map_err(|e| {
                Error::format(format!("instance {} is invalid: {e}", p.display()))
            })
        })
        .collect()
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let cfg = resolve_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, cfg.train.seed)?;
    if args.seqs == 0 {
        return Err(Error::config("sequence count must be positive"));
    }

    // Flag, then config profile, then the bundled set.
    let dir = args.instances.clone().or(match &cfg.task {
        TaskProfile::Tabular { instances } => Some(instances.clone()),
        TaskProfile::Curve => None,
    });
    let (source, mut instances) = match &dir {
        Some(d) => (d.display().to_string(), load_instance_dir(d)?),
        None => ("bundled".to_string(), Vec::new()),
    };
    instances.extend(bundled_instances());

    let report = crate::oracle::run_verification(&instances, seed, args.seqs)?;
    print_verification(&report);

    let echo = artifact_echo(
        &cfg,
        "verify",
        json!({ "instances": source, "seqs": args.seqs, "seed": seed }),
    );
    let body = json!({
        "config": echo,
        "source": source,
        "report": report,
        "all_pass": report.all_pass(),
    });
    write_text(&args.out, &serde_json::to_string_pretty(&body)?)?;
    println!("wrote {}", args.out.display());

    if report.all_pass() {
        Ok(0)
    } else {
        Ok(EXIT_VERIFY_FAILED)
    }
}

fn print_verification(report: &VerificationReport) {
    println!("{} instances", report.instances);
    for check in &report.checks {
        let status = if check.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {} (worst {:.3e}, tolerance {:.0e})",
            check.name, check.worst, check.tolerance
        );
    }
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlotArgs {
    pub config: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub window: usize,
    pub out: PathBuf,
}

pub fn cmd_plot(args: &PlotArgs) -> Result<i32> {
    let cfg = resolve_config(args.config.as_deref())?;
    let echo = artifact_echo(
        &cfg,
        "plot",
        json!({
            "metrics": args.metrics,
            "demos": args.demos,
            "window": args.window,
            "out": args.out,
        }),
    );
    let svg = match (&args.metrics, &args.demos) {
        (Some(metrics), None) => {
            let text = fs::read_to_string(metrics)?;
            let rows = parse_metrics_csv(&text)?;
            plot_metrics(&rows, args.window, &echo.to_string())
        }
        (None, Some(demos)) => {
            let (env, demo_list) = read_demos(demos)?;
            plot_demo_paths(&env, &demo_list, &echo.to_string())
        }
        _ => {
            return Err(Error::config(
                "pass exactly one of --metrics <csv> or --demos <jsonl>",
            ))
        }
    };
    write_text(&args.out, &svg)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// One parsed metrics row; unscored evaluations leave the residual out.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsPoint {
    pub step: u64,
    pub acceptance: f64,
    pub residual: Option<f64>,
}

/// Parses the training metrics CSV, tolerating leading `#` comments.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsPoint>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::format("metrics file is empty"))?;
    if header != crate::training::METRICS_HEADER {
        return Err(Error::format(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::format(format!(
                "metrics row {} has {} fields, expected 6",
                i + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::format(format!("bad {what} {s:?} in metrics row {}", i + 1)))
        };
        let step = fields[0]
            .parse::<u64>()
            .map_err(|_| Error::format(format!("bad step {:?} in metrics row {}", fields[0], i + 1)))?;
        let acceptance = parse(fields[1], "acceptance rate")?;
        let residual =
            if fields[2].is_empty() { None } else { Some(parse(fields[2], "residual")?) };
        // Remaining fields are validated for shape but not plotted.
        parse(fields[3], "policy loss")?;
        parse(fields[4], "transition nll")?;
        fields[5]
            .parse::<u64>()
            .map_err(|_| Error::format(format!("bad buffer size in metrics row {}", i + 1)))?;
        rows.push(MetricsPoint { step, acceptance, residual });
    }
    if rows.is_empty() {
        return Err(Error::format("metrics file has no data rows"));
    }
    Ok(rows)
}

/// Centered moving average; the window is clipped at both edges so the
/// output has the input's length. A window of 0 or 1 copies the input.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = usize::min(values.len(), i + half + 1);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

struct Viewport {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

/// Maps data coordinates into a viewport; the y axis flips so larger
/// values draw higher. Degenerate ranges land in the middle.
fn map_point(
    (x, y): (f64, f64),
    (dx0, dx1): (f64, f64),
    (dy0, dy1): (f64, f64),
    vp: &Viewport,
) -> (f64, f64) {
    let fx = if dx1 > dx0 { (x - dx0) / (dx1 - dx0) } else { 0.5 };
    let fy = if dy1 > dy0 { (y - dy0) / (dy1 - dy0) } else { 0.5 };
    (vp.x0 + fx * (vp.x1 - vp.x0), vp.y1 - fy * (vp.y1 - vp.y0))
}

fn svg_series(
    points: &[(f64, f64)],
    x_range: (f64, f64),
    y_range: (f64, f64),
    vp: &Viewport,
    stroke: &str,
    width: f64,
) -> String {
    let mapped: Vec<(f64, f64)> =
        points.iter().map(|&p| map_point(p, x_range, y_range, vp)).collect();
    let mut out = String::new();
    if mapped.len() > 1 {
        let coords: Vec<String> =
            mapped.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
    }
    // Vertex dots keep single-point series visible.
    for (x, y) in &mapped {
        out.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"{stroke}\"/>\n"
        ));
    }
    out
}

fn svg_panel_frame(vp: &Viewport, title: &str, y_label_lo: &str, y_label_hi: &str) -> String {
    format!(
        concat!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>\n",
            "<text x=\"{x0}\" y=\"{ty}\" font-family=\"monospace\" font-size=\"13\" fill=\"#333\">{title}</text>\n",
            "<text x=\"{lx}\" y=\"{y1}\" font-family=\"monospace\" font-size=\"10\" fill=\"#666\" text-anchor=\"end\">{lo}</text>\n",
            "<text x=\"{lx}\" y=\"{y0d}\" font-family=\"monospace\" font-size=\"10\" fill=\"#666\" text-anchor=\"end\">{hi}</text>\n",
        ),
        x0 = vp.x0,
        y0 = vp.y0,
        w = vp.x1 - vp.x0,
        h = vp.y1 - vp.y0,
        ty = vp.y0 - 8.0,
        lx = vp.x0 - 6.0,
        y1 = vp.y1,
        y0d = vp.y0 + 10.0,
        title = title,
        lo = y_label_lo,
        hi = y_label_hi,
    )
}

fn svg_document(width: f64, height: f64, echo: &str, body: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<!-- lanmdp {echo} -->\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n",
            "{body}",
            "</svg>\n"
        ),
        w = width,
        h = height,
        echo = echo.replace("--", "- -"),
        body = body,
    )
}

/// Line plot of smoothed acceptance rate and fit residual over training
/// steps, one panel each.
pub fn plot_metrics(rows: &[MetricsPoint], window: usize, echo: &str) -> String {
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let x_range = (steps[0], *steps.last().unwrap());

    let acceptance: Vec<f64> = rows.iter().map(|r| r.acceptance).collect();
    let smoothed = moving_average(&acceptance, window);

    let residual_points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.residual.map(|v| (r.step as f64, v)))
        .collect();
    let residual_max = residual_points
        .iter()
        .map(|&(_, v)| v)
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let top = Viewport { x0: 60.0, x1: 690.0, y0: 40.0, y1: 220.0 };
    let bottom = Viewport { x0: 60.0, x1: 690.0, y0: 280.0, y1: 440.0 };

    let mut body = String::new();
    body.push_str(&svg_panel_frame(&top, "acceptance rate", "0", "1"));
    let raw: Vec<(f64, f64)> = steps.iter().copied().zip(acceptance).collect();
    let smooth: Vec<(f64, f64)> = steps.iter().copied().zip(smoothed).collect();
    body.push_str(&svg_series(&raw, x_range, (0.0, 1.0), &top, "#b8cce4", 1.0));
    body.push_str(&svg_series(&smooth, x_range, (0.0, 1.0), &top, "#1f4e97", 2.0));

    body.push_str(&svg_panel_frame(
        &bottom,
        "fit residual (accepted rollouts)",
        "0",
        &format!("{residual_max:.3}"),
    ));
    body.push_str(&svg_series(
        &residual_points,
        x_range,
        (0.0, residual_max),
        &bottom,
        "#9c2f2f",
        2.0,
    ));
    body.push_str(&format!(
        "<text x=\"375\" y=\"468\" font-family=\"monospace\" font-size=\"11\" fill=\"#666\" text-anchor=\"middle\">training step ({} to {})</text>\n",
        x_range.0, x_range.1
    ));

    svg_document(720.0, 480.0, echo, &body)
}

/// 2-D path plot of demo trajectories on the board.
pub fn plot_demo_paths(env: &CurveEnvConfig, demos: &[CurveDemo], echo: &str) -> String {
    let vp = Viewport { x0: 60.0, x1: 660.0, y0: 40.0, y1: 440.0 };
    let mut body = String::new();
    body.push_str(&svg_panel_frame(
        &vp,
        "demonstrations",
        &format!("{}", env.y_range.0),
        &format!("{}", env.y_range.1),
    ));
    for (i, demo) in demos.iter().enumerate() {
        let points: Vec<(f64, f64)> = demo.points.iter().map(|p| (p[0], p[1])).collect();
        let hue = (i * 47) % 360;
        body.push_str(&svg_series(
            &points,
            env.x_range,
            env.y_range,
            &vp,
            &format!("hsl({hue}, 55%, 40%)"),
            1.2,
        ));
    }
    svg_document(720.0, 480.0, echo, &body)
}
