//! Command implementations behind the `ucar` binary: simulate the lab,
//! identify model parameters from logs, follow trajectories and evaluate
//! models. Every run writes a manifest that `ucar rerun` can replay.

mod commands;
mod manifest;

pub use commands::{run, IdentifyOptions};
pub use manifest::{FileDigest, RunManifest};

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub reason: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reason)
    }
}

impl std::error::Error for Failure {}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INSUFFICIENT: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

pub fn config_error(reason: impl Into<String>) -> anyhow::Error {
    Failure {
        code: EXIT_CONFIG,
        reason: reason.into(),
    }
    .into()
}

pub fn insufficient(reason: impl Into<String>) -> anyhow::Error {
    Failure {
        code: EXIT_INSUFFICIENT,
        reason: reason.into(),
    }
    .into()
}

pub fn runtime_error(reason: impl Into<String>) -> anyhow::Error {
    Failure {
        code: EXIT_RUNTIME,
        reason: reason.into(),
    }
    .into()
}

#[derive(Debug, Parser)]
#[command(
    name = "ucar",
    version,
    about = "Lab simulator, identification and control for 1:18 model vehicles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Invocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerChoice {
    Mpc,
    Pid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitModeArg {
    Measured,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseArg {
    None,
    Typical,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Scenario file (JSON).
    pub scenario: PathBuf,
    /// Lab configuration (JSON). Defaults are used when omitted.
    #[arg(long)]
    pub lab: Option<PathBuf>,
    /// Output directory for the trace and manifest.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Overrides the lab seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FollowArgs {
    pub scenario: PathBuf,
    /// Model parameters: an identification report or a JSON array of 10 numbers.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub lab: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ControllerChoice::Mpc)]
    pub controller: ControllerChoice,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IdentifyArgs {
    /// Measurement log (CSV).
    pub log: PathBuf,
    /// Identification options (JSON). Flags take precedence.
    #[arg(long)]
    pub options: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long, short)]
    pub out: PathBuf,
    /// Samples per experiment.
    #[arg(long)]
    pub window: Option<usize>,
    /// Delay ranges, e.g. `ips=0..3,local=0..2,act=0..8`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_enum)]
    pub init_mode: Option<InitModeArg>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalModelArgs {
    pub log: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory for residual statistics and plot data.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Delays as `ips,local,act`. Defaults to the delays in the params report.
    #[arg(long)]
    pub delays: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    /// `free` fits each experiment's initial state with the parameters held
    /// fixed; `measured` starts from the first aligned measurement.
    #[arg(long, value_enum, default_value_t = InitModeArg::Free)]
    pub init_mode: InitModeArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenLogArgs {
    /// Log file to write (CSV).
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "random-chirp")]
    pub profile: String,
    /// Log length [s].
    #[arg(long, default_value_t = 120.0)]
    pub duration: f64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Typical)]
    pub noise: NoiseArg,
    /// Generating parameters. Defaults to the reference vector.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Delays as `ips,local,act`.
    #[arg(long, default_value = "1,0,5")]
    pub delays: String,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded locations.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    /// Run a scenario and write its trace.
    Simulate(SimulateArgs),
    /// Closed-loop run with supplied model parameters and a tracking summary.
    Follow(FollowArgs),
    /// Identify parameters and delays from a measurement log.
    Identify(IdentifyArgs),
    /// Replay a model open loop against a log and report residuals.
    EvalModel(EvalModelArgs),
    /// Generate a synthetic identification log.
    GenLog(GenLogArgs),
    /// Repeat a run from its manifest and check the outputs match.
    #[serde(skip)]
    Rerun(RerunArgs),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Simulate(_) => "simulate",
            Invocation::Follow(_) => "follow",
            Invocation::Identify(_) => "identify",
            Invocation::EvalModel(_) => "eval-model",
            Invocation::GenLog(_) => "gen-log",
            Invocation::Rerun(_) => "rerun",
        }
    }
}

/// Exit code for the outcome of [`run`].
pub fn exit_code(result: &anyhow::Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(err) => err
            .downcast_ref::<Failure>()
            .map_or(EXIT_RUNTIME, |f| f.code),
    }
}

/// Parse `args` (program name first), run the command and return its exit
/// code. Errors are reported on stderr as one line.
pub fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let result = run(&cli.command);
    if let Err(err) = &result {
        eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
    }
    exit_code(&result)
}
