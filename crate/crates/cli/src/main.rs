mod commands;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::UsageError;

#[derive(Parser, Debug)]
#[command(name = "galite", version, about = "Recurrent linear attention experiments, checks and benchmarks")]
pub struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for CSV outputs and the run manifest. Without it, CSV goes
    /// to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file of `key = value` settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Oracle equivalence suites.
    Equiv,
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Reconstruction error of the cosine state against the exact state.
    ApproxError(ApproxArgs),
    /// Table of the approximate Kronecker delta.
    Delta(DeltaArgs),
    /// Exact operation counts and state sizes.
    BenchOps(OpsArgs),
    /// Step and sequence latency.
    BenchLatency(LatencyArgs),
    /// A2C on the T-Maze.
    TrainTmaze(TrainArgs),
    /// Gating, feature-map and rank-1 ablations on the T-Maze.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct ApproxArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    /// Comma-separated r values.
    #[arg(long)]
    pub r: Option<String>,
    /// Comma-separated constant gate values.
    #[arg(long)]
    pub c: Option<String>,
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DeltaArgs {
    #[arg(long)]
    pub r: Option<u64>,
    /// Largest m and n.
    #[arg(long)]
    pub max: Option<u64>,
}

#[derive(Args, Debug)]
pub struct OpsArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "d-h")]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub eta: Option<usize>,
    #[arg(long)]
    pub r: Option<u64>,
    /// Comma-separated stream positions.
    #[arg(long)]
    pub t: Option<String>,
    /// Comma-separated window sizes.
    #[arg(long)]
    pub memory: Option<String>,
}

#[derive(Args, Debug)]
pub struct LatencyArgs {
    #[arg(long)]
    pub reps: Option<usize>,
    /// Calls per timed repetition.
    #[arg(long)]
    pub inner: Option<usize>,
    /// `step`, `sequence` or `both`.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// linear, galite, agalite, random-sign or windowed.
    #[arg(long)]
    pub mechanism: Option<String>,
    #[arg(long)]
    pub eta: Option<usize>,
    #[arg(long)]
    pub r: Option<u64>,
    /// Window size for windowed attention.
    #[arg(long)]
    pub memory: Option<usize>,
    /// elu or outer-relu.
    #[arg(long = "feature-map")]
    pub feature_map: Option<String>,
    /// learned, off or fixed:BETA:GAMMA.
    #[arg(long)]
    pub gating: Option<String>,
    #[arg(long = "derivation-scaling")]
    pub derivation_scaling: Option<bool>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "d-h")]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub corridor: Option<usize>,
    /// Environment steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub envs: Option<usize>,
    #[arg(long)]
    pub rollout: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub entropy: Option<f64>,
    #[arg(long = "value-coef")]
    pub value_coef: Option<f64>,
    #[arg(long = "max-grad-norm")]
    pub max_grad_norm: Option<f64>,
    /// Trailing window of environment steps for the success rate.
    #[arg(long = "eval-window")]
    pub eval_window: Option<u64>,
    /// Progress line every this many updates.
    #[arg(long = "log-every")]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Seeds per variant.
    #[arg(long)]
    pub runs: Option<u64>,
    /// Comma-separated subset of base, gating-off, elu-features, random-sign.
    #[arg(long)]
    pub variants: Option<String>,
}

/// Exit code for `argv` (program name first).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(commands::Failure::Usage(UsageError(msg))) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            2
        }
        Err(commands::Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()) as u8)
}
