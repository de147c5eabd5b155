/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

mod bundle;
mod commands;
mod plotdata;
mod spec;

use std::fmt;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pre_forge::Error;

/// Exit codes: 1 = nothing found or a check failed, 2 = usage, 3 = numeric failure.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::SynthesisFailure { .. } | Error::RealizationFailure { .. } | Error::InfeasibleSubspace => 1,
            Error::Convergence { .. }
            | Error::NonFinite
            | Error::NoUniqueSteadyState(_)
            | Error::RankDeficientSteadyState(_) => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser, Debug, Clone)]
#[command(name = "pre-forge", version, about = "Find, verify and realize physically realizable ensembles of Lindblad master equations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Spec file, or `catalog:<name>` for a built-in model.
    pub spec: String,
    /// Bind a parameter, `name=value` (repeatable).
    #[arg(long = "param", short = 'p', value_parser = spec::parse_binding)]
    pub params: Vec<(String, f64)>,
}

#[derive(Args, Debug, Clone)]
pub struct EnsembleArgs {
    /// Ensemble JSON, or a result bundle from `search`.
    #[arg(long)]
    pub ensemble: String,
    /// Which search result to take from a bundle.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Graph {
    Cyclic,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Reduce {
    Auto,
    None,
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    /// Ensemble size.
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Graph::Cyclic)]
    pub graph: Graph,
    /// `auto` (smallest invariant subspaces first), `none`, or an index as
    /// listed by `analyze`.
    #[arg(long, default_value = "auto")]
    pub subspace: String,
    /// Explicit subspace of the translated coherence space, columns
    /// separated by `;`, e.g. `1,0,0;0,0,1`. Overrides --subspace.
    #[arg(long)]
    pub basis: Option<String>,
    #[arg(long, value_enum, default_value_t = Reduce::Auto)]
    pub wigner_reduce: Reduce,
    /// Count ensembles related by a discrete symmetry of the model once.
    #[arg(long)]
    pub dedup_symmetry: bool,
    #[arg(long, default_value_t = 512)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub rng: u64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Print the Bloch-space model, spectrum, invariant subspaces and symmetries.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Write a result bundle.
        #[arg(long)]
        out: Option<String>,
    },
    /// Search for ensembles of a given size.
    Search {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        search: SearchArgs,
        #[arg(long)]
        out: Option<String>,
    },
    /// Check an ensemble against the master equation on density matrices.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        out: Option<String>,
    },
    /// Synthesize an adaptive measurement scheme realizing an ensemble.
    Scheme {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Number of detectors (defaults to the number of Lindblad operators).
        #[arg(long)]
        detectors: Option<usize>,
        /// Cap on |β|² as a multiple of the largest steady-state channel rate;
        /// `inf` lifts it.
        #[arg(long, default_value_t = pre_forge::measurement::WLO_FACTOR)]
        wlo_factor: f64,
        #[arg(long)]
        out: Option<String>,
    },
    /// Run a quantum-jump trajectory under the synthesized scheme.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long)]
        detectors: Option<usize>,
        #[arg(long, default_value_t = pre_forge::measurement::WLO_FACTOR)]
        wlo_factor: f64,
        #[arg(long, default_value_t = 100_000)]
        jumps: usize,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long, default_value_t = 0)]
        rng: u64,
        /// Write the jump record as CSV.
        #[arg(long)]
        events: Option<String>,
        /// Record only every n-th jump.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Also average this many trajectories against the master equation.
        #[arg(long)]
        unconditional: Option<usize>,
        /// Comparison times for --unconditional, comma separated.
        #[arg(long, default_value = "0,0.5,1,2,4")]
        times: String,
        #[arg(long)]
        out: Option<String>,
    },
    /// Count ensembles over a parameter grid; writes CSV `param,count`.
    Scan {
        #[command(flatten)]
        model: ModelArgs,
        /// Parameter to vary.
        #[arg(long)]
        vary: String,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        #[command(flatten)]
        search: SearchArgs,
        /// CSV destination (stdout if absent).
        #[arg(long)]
        csv: Option<String>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Emit CSV data for one of the standard figures from a bundle.
    Plotdata {
        bundle: String,
        /// fig1a, fig1b, fig1c, fig1d, fig2, fig3, fig4a or fig4b.
        #[arg(long)]
        figure: String,
        #[arg(long)]
        out: Option<String>,
    },
    /// Re-execute the command stored in a bundle and compare the results.
    Rerun {
        bundle: String,
        #[arg(long)]
        out: Option<String>,
    },
    /// List the built-in models, or print one as a spec file.
    Catalog { name: Option<String> },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PRE_FORGE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("PRE_FORGE_THREADS={v}: expected a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let result = configure_threads().and_then(|_| commands::run(cli, argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
