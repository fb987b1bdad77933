//! Command-line front end: argument parsing only, all behavior lives in
//! [`lanmdp::cli`].

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lanmdp::cli::{
    self, EvalArgs, GenDemosArgs, PlanArgs, PlotArgs, TrainArgs, TransitionSetup, VerifyArgs,
};
use lanmdp::training::PosteriorMode;

#[derive(Parser)]
#[command(
    name = "lanmdp",
    about = "Latent-action models of state-only demonstrations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Importance,
    Mcmc,
}

impl From<ModeArg> for PosteriorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Importance => PosteriorMode::Importance,
            ModeArg::Mcmc => PosteriorMode::Mcmc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransitionArg {
    Learned,
    Implanted,
}

impl From<TransitionArg> for TransitionSetup {
    fn from(t: TransitionArg) -> Self {
        match t {
            TransitionArg::Learned => TransitionSetup::Learned,
            TransitionArg::Implanted => TransitionSetup::Implanted,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample cubic demonstrations and write them as JSONL.
    GenDemos {
        /// Run configuration file (JSON); defaults reproduce the curve study.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of demonstrations to keep.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Minimum |cubic coefficient| for a demo to count as curved.
        #[arg(long, default_value_t = 1.0)]
        min_a: f64,
        /// Master seed; falls back to LANMDP_SEED, then the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output demo file.
        #[arg(long, default_value = "demos.jsonl")]
        out: PathBuf,
    },
    /// Fit the policy and transition on a demo file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Demo file from gen-demos.
        #[arg(long)]
        demos: PathBuf,
        /// Context window length (overrides the config).
        #[arg(long)]
        context: Option<usize>,
        /// Training iterations (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
        /// Posterior estimator.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Learned ensemble or the implanted exact dynamics.
        #[arg(long, value_enum)]
        transition: Option<TransitionArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Model bundle output.
        #[arg(long, default_value = "bundle.json")]
        out_bundle: PathBuf,
        /// Metrics CSV output.
        #[arg(long, default_value = "metrics.csv")]
        out_metrics: PathBuf,
    },
    /// Roll out a trained policy and score the trajectories.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model bundle from train.
        #[arg(long, default_value = "bundle.json")]
        model: PathBuf,
        /// Number of evaluation rollouts.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Sampler noise during rollouts (overrides the config).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluation report output (JSON).
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
    },
    /// Plan an action sequence from a state prefix to a goal state.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bundle.json")]
        model: PathBuf,
        /// Past states "x,y;x,y;..." ending at the current state.
        #[arg(long, allow_hyphen_values = true)]
        prefix: String,
        /// Goal state "x,y".
        #[arg(long, allow_hyphen_values = true)]
        goal: String,
        /// Steps to plan; defaults to the grid columns left of the edge.
        #[arg(long)]
        steps: Option<usize>,
        /// Sampler noise for the action initializer.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step plan output (CSV).
        #[arg(long, default_value = "plan.csv")]
        out_csv: PathBuf,
        /// Plan summary output (JSON).
        #[arg(long, default_value = "plan.json")]
        out_summary: PathBuf,
    },
    /// Check sampling identities against exact tabular enumeration.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of instance files (*.json); bundled instances always run.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Monte Carlo sequences per instance.
        #[arg(long, default_value_t = 20)]
        seqs: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Verification report output (JSON).
        #[arg(long, default_value = "verify.json")]
        out: PathBuf,
    },
    /// Render a metrics CSV or a demo file as a static SVG.
    Plot {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics CSV from train.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Demo file from gen-demos.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Moving-average window for the acceptance curve.
        #[arg(long, default_value_t = 9)]
        window: usize,
        /// SVG output.
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
    },
}

fn run(command: Command) -> lanmdp::Result<i32> {
    match command {
        Command::GenDemos { config, n, min_a, seed, out } => {
            cli::cmd_gen_demos(&GenDemosArgs { config, n, min_a, seed, out })
        }
        Command::Train {
            config,
            demos,
            context,
            steps,
            mode,
            transition,
            seed,
            out_bundle,
            out_metrics,
        } => cli::cmd_train(&TrainArgs {
            config,
            demos,
            context,
            steps,
            mode: mode.map(Into::into),
            transition: transition.map(Into::into),
            seed,
            out_bundle,
            out_metrics,
        }),
        Command::Eval { config, model, n, noise, seed, out } => {
            cli::cmd_eval(&EvalArgs { config, model, n, noise, seed, out })
        }
        Command::Plan {
            config,
            model,
            prefix,
            goal,
            steps,
            noise,
            seed,
            out_csv,
            out_summary,
        } => cli::cmd_plan(&PlanArgs {
            config,
            model,
            prefix,
            goal,
            steps,
            noise,
            seed,
            out_csv,
            out_summary,
        }),
        Command::Verify { config, instances, seqs, seed, out } => {
            cli::cmd_verify(&VerifyArgs { config, instances, seqs, seed, out })
        }
        Command::Plot { config, metrics, demos, window, out } => {
            cli::cmd_plot(&PlotArgs { config, metrics, demos, window, out })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::EXIT_USAGE as u8)
        }
    }
}
