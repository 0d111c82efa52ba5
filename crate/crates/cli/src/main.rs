//! `cdiff`: demo collection, training, planning, evaluation and guidance
//! generation for the trajectory diffusion planner.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cdiff::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cdiff", version, about = "Guided trajectory diffusion planner for contact-rich toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory for every artifact and the manifest.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Environment: door1d, hammer1d or disk.
    #[arg(long)]
    pub env: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the scripted expert and save the demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
        /// Number of episodes.
        #[arg(long)]
        demos: Option<String>,
        #[arg(long)]
        demo_seed: Option<String>,
    },
    /// Train the denoiser, the dynamics model and optionally the conditional denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        demo_path: Option<String>,
        #[arg(long)]
        train_steps: Option<String>,
        #[arg(long)]
        horizon: Option<String>,
        /// Also train the goal-conditioned denoiser.
        #[arg(long)]
        conditional: bool,
    },
    /// Run one closed-loop episode and archive the rollout.
    Plan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanFlags,
        #[arg(long)]
        mode: Option<String>,
        /// Goal components, comma-separated.
        #[arg(long, allow_hyphen_values = true)]
        goal: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Evaluate modes x goals over seeds and tries.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanFlags,
        /// Modes, comma-separated.
        #[arg(long)]
        modes: Option<String>,
        /// Goals separated by `;`, or `door_suite`.
        #[arg(long, allow_hyphen_values = true)]
        goals: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        tries: Option<String>,
    },
    /// Generate a guidance script with an LLM, feeding errors back.
    GuidanceGen {
        #[command(flatten)]
        common: Common,
        /// Recorded responses instead of a live endpoint.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long)]
        max_rounds: Option<String>,
        #[arg(long)]
        two_stage: bool,
    },
    /// Render a results CSV as CSV or markdown.
    Report {
        #[command(flatten)]
        common: Common,
        /// Results CSV (default <out>/results.csv).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Args, Debug, Clone)]
struct PlanFlags {
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    model_dir: Option<String>,
    /// Guidance script for full mode.
    #[arg(long)]
    program: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Format {
    Csv,
    Markdown,
}

type Overrides = Vec<(&'static str, Option<String>)>;

fn plan_overrides(p: PlanFlags) -> Overrides {
    vec![("alpha", p.alpha), ("omega", p.omega), ("model_dir", p.model_dir), ("program", p.program)]
}

fn flag(b: bool) -> Option<String> {
    b.then(|| "true".to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownEnv(_) | Error::Unsupported(_) | Error::MissingModel(_) | Error::Dsl(_) | Error::Dimension(_) => 2,
        Error::Transport(_) | Error::Exhausted { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, common, typed): (&str, Common, Overrides) = match cli.command {
        Command::GenDemos { common, demos, demo_seed } => ("gen-demos", common, vec![("demos", demos), ("demo_seed", demo_seed)]),
        Command::Train {
            common,
            demo_path,
            train_steps,
            horizon,
            conditional,
        } => (
            "train",
            common,
            vec![
                ("demo_path", demo_path),
                ("train_steps", train_steps),
                ("horizon", horizon),
                ("conditional", flag(conditional)),
            ],
        ),
        Command::Plan {
            common,
            plan,
            mode,
            goal,
            seed,
        } => {
            let mut o = plan_overrides(plan);
            o.extend([("mode", mode), ("goal", goal), ("seed", seed)]);
            ("plan", common, o)
        }
        Command::Eval {
            common,
            plan,
            modes,
            goals,
            seeds,
            tries,
        } => {
            let mut o = plan_overrides(plan);
            o.extend([("modes", modes), ("goals", goals), ("seeds", seeds), ("tries", tries)]);
            ("eval", common, o)
        }
        Command::GuidanceGen {
            common,
            fixture,
            instruction,
            max_rounds,
            two_stage,
        } => (
            "guidance-gen",
            common,
            vec![
                ("fixture", fixture),
                ("instruction", instruction),
                ("max_rounds", max_rounds),
                ("two_stage", flag(two_stage)),
            ],
        ),
        Command::Report { common, input, format } => return finish(commands::report(&common, input, format)),
    };
    finish(commands::run(name, &common, typed))
}

fn finish(r: cdiff::Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
