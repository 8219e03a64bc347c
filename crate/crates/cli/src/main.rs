//! `skewfront`: wave speeds of FKPP fronts on random metric trees.
//!
//! Exit codes: 0 success, 1 error, 2 failed validation (always for
//! `validate`, and for other subcommands under `--strict`), 64 usage error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::output::{manifest_path, write_file, Format, Manifest};

/// Bad flags, config files or argument syntax (exit 64).
#[derive(Debug)]
pub struct UsageError(pub String);

/// Everything that can stop a run.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<skewfront::Error> for Failure {
    fn from(e: skewfront::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

const EXIT_ERROR: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "skewfront",
    version,
    about = "Wave speeds of FKPP fronts on symmetric random metric trees",
    after_help = "Settings are resolved as: flags > SKEWFRONT_* environment variables > --config file > defaults.\n\
                  Use --show-config to print the resolved settings."
)]
pub struct Cli {
    /// TOML file with settings (sections: env, lyapunov, xi, eta_c, speed, mc, pde, validate).
    #[arg(long, global = true, env = "SKEWFRONT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print the resolved settings as TOML and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
    /// Output format (each subcommand has its own default).
    #[arg(long, global = true, value_enum, env = "SKEWFRONT_OUTPUT")]
    pub output: Option<Format>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "SKEWFRONT_THREADS")]
    pub threads: Option<usize>,
    /// Write the result here (plus `<out>.manifest.json`) instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Manifest location (default: next to `--out`; none for stdout).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Exit with code 2 when a result is uncertified or an assumption fails.
    #[arg(long, global = true, env = "SKEWFRONT_STRICT")]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random environment and write it as JSON.
    GenEnv(GenEnvArgs),
    /// Limit ratio 1/ξ of the interface matrix products.
    /// CSV columns: lambda, inv_xi, iterations, certified_bound, status.
    Xi(XiArgs),
    /// Lyapunov exponent μ(−λ) on a grid, with μ(0) and μ′(0).
    /// CSV columns: lambda, mu, std_error.
    Mu(MuArgs),
    /// Critical exponent η_c with its bracket.
    EtaC(EtaCArgs),
    /// Asymptotic front speed c* at one reaction rate β.
    Speed(SpeedArgs),
    /// c* against β (or against the skewness p of constant trees).
    /// CSV columns: beta, c_star, lambda_star, beta_c, assumption, sqrt_2beta[, pde_speed]
    /// or d, p, beta, c_star, beta_c, assumption.
    SpeedSweep(SweepArgs),
    /// Monte Carlo E[exp(−λT); T < ∞] for the hitting time of z_to from z_from.
    /// CSV columns: the scalar fields of the JSON result.
    McHit(McHitArgs),
    /// Lattice-walk estimate of the drift E[Y_t]/t.
    /// CSV columns: the scalar fields of the JSON result.
    McDrift(McDriftArgs),
    /// Finite-t values of ln E[exp(−λT)]/((v−c)t), T the hitting time of ct from vt.
    /// CSV columns: t, value, std_error, log_q, levels, flagged.
    McLdp(McLdpArgs),
    /// Solve the FKPP equation on the projected tree and track the front.
    /// CSV columns: t, x_front_right, x_front_left. Snapshots: x, v.
    Pde(PdeArgs),
    /// Cross-check the analytic pipeline against independent oracles.
    /// CSV columns: check, value, reference, error, tolerance, status, note.
    Validate(ValidateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenEnv(_) => "gen-env",
            Command::Xi(_) => "xi",
            Command::Mu(_) => "mu",
            Command::EtaC(_) => "eta-c",
            Command::Speed(_) => "speed",
            Command::SpeedSweep(_) => "speed-sweep",
            Command::McHit(_) => "mc-hit",
            Command::McDrift(_) => "mc-drift",
            Command::McLdp(_) => "mc-ldp",
            Command::Pde(_) => "pde",
            Command::Validate(_) => "validate",
        }
    }
}

/// Where the environment comes from.
#[derive(Debug, Args)]
pub struct EnvArgs {
    /// Environment JSON file (from `gen-env`); otherwise one is generated.
    #[arg(long, env = "SKEWFRONT_ENV")]
    pub env: Option<PathBuf>,
    /// Degree support `d:w,d:w,…`.
    #[arg(long, env = "SKEWFRONT_DEGREES")]
    pub degrees: Option<String>,
    /// Length law `l:w,l:w,…` or `uniform:lo:hi`.
    #[arg(long, env = "SKEWFRONT_LENGTHS")]
    pub lengths: Option<String>,
    /// Generations to materialize.
    #[arg(long, env = "SKEWFRONT_HORIZON")]
    pub horizon: Option<usize>,
    /// Seed of the generated environment.
    #[arg(long, env = "SKEWFRONT_ENV_SEED")]
    pub env_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenEnvArgs {
    #[arg(long, env = "SKEWFRONT_DEGREES")]
    pub degrees: Option<String>,
    #[arg(long, env = "SKEWFRONT_LENGTHS")]
    pub lengths: Option<String>,
    #[arg(long, env = "SKEWFRONT_HORIZON")]
    pub horizon: Option<usize>,
    #[arg(long, env = "SKEWFRONT_ENV_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct XiArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// `lo:hi:n` (λ > 0).
    #[arg(long, env = "SKEWFRONT_LAMBDA_GRID")]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LyapunovArgs {
    /// Environment shifts in the ergodic average.
    #[arg(long, env = "SKEWFRONT_N_INTERFACES")]
    pub n_interfaces: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MuArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub lyapunov: LyapunovArgs,
    /// `lo:hi:n` (λ > 0).
    #[arg(long, env = "SKEWFRONT_LAMBDA_GRID")]
    pub lambda_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct EtaCArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Largest height truncation tried.
    #[arg(long)]
    pub height_cap: Option<usize>,
    #[arg(long)]
    pub move_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SpeedArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub lyapunov: LyapunovArgs,
    #[arg(long, env = "SKEWFRONT_BETA")]
    pub beta: Option<f64>,
    /// `d,ell`: use the closed form of the constant tree instead of an environment.
    #[arg(long)]
    pub closed_form: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub lyapunov: LyapunovArgs,
    /// `lo:hi:n` grid of reaction rates.
    #[arg(long, env = "SKEWFRONT_BETA_GRID")]
    pub beta: Option<String>,
    /// `d,ell`: sweep the constant-tree closed form.
    #[arg(long)]
    pub closed_form: Option<String>,
    /// Also solve the PDE at every β (settings from the `pde` section).
    #[arg(long)]
    pub pde: bool,
    /// `lo:hi`: sweep constant trees of these degrees at fixed `--at-beta`.
    #[arg(long)]
    pub vs_degree: Option<String>,
    /// Edge length of the constant trees in `--vs-degree`.
    #[arg(long, default_value_t = 1.0)]
    pub ell: f64,
    /// Reaction rate for `--vs-degree` (default: the `speed.beta` setting).
    #[arg(long)]
    pub at_beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long, env = "SKEWFRONT_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "SKEWFRONT_N_PATHS")]
    pub n_paths: Option<usize>,
}

#[derive(Debug, Args)]
pub struct McHitArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub mc: McArgs,
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<i64>,
    #[arg(long, env = "SKEWFRONT_LAMBDA")]
    pub lambda: Option<f64>,
    /// Use the lattice walk with this spacing instead of exact skew exits.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub kill_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct McDriftArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub mc: McArgs,
    /// Lattice spacing (default ℓ_lo/8).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<i64>,
}

#[derive(Debug, Args)]
pub struct McLdpArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub mc: McArgs,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub v: Option<f64>,
    #[arg(long, env = "SKEWFRONT_LAMBDA")]
    pub lambda: Option<f64>,
    /// Comma-separated times.
    #[arg(long)]
    pub t_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct PdeArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, env = "SKEWFRONT_BETA")]
    pub beta: Option<f64>,
    /// Half-width L of the domain [−L, L].
    #[arg(long = "L")]
    pub half_width: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub dx: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub front_level: Option<f64>,
    #[arg(long)]
    pub fit_window: Option<f64>,
    #[arg(long)]
    pub record_interval: Option<f64>,
    /// Comma-separated times at which to save the field.
    #[arg(long)]
    pub snapshot_times: Option<String>,
    /// Directory for `snapshot_<k>.csv` files (default time: t_max).
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub lyapunov: LyapunovArgs,
    /// Simulated exits per kernel.
    #[arg(long)]
    pub n_exits: Option<usize>,
    /// Interfaces whose kernels are simulated.
    #[arg(long)]
    pub n_kernels: Option<usize>,
    #[arg(long, env = "SKEWFRONT_SEED")]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let started = Instant::now();
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(cmd) = &cli.command {
        commands::apply_flags(cmd, &mut cfg);
    }
    if cli.show_config {
        print!("{}", cfg.to_toml());
        return Ok(0);
    }
    let Some(cmd) = &cli.command else {
        return Err(Failure::Usage("a subcommand is required".into()));
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Run(e.to_string()))?;
    }

    let report = commands::execute(cmd, &cfg, cli.strict)?;
    let format = cli.output.unwrap_or(report.default_format);
    let text = report.render(format);
    match &cli.out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }

    let manifest_file = cli.manifest.clone().or_else(|| cli.out.as_deref().map(manifest_path));
    if let Some(path) = manifest_file {
        let mut outputs: Vec<String> = cli.out.iter().map(|p| p.display().to_string()).collect();
        outputs.extend(report.files.iter().map(|p| p.display().to_string()));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: cmd.name(),
            argv: std::env::args().collect(),
            config: &cfg,
            seeds: &report.seeds,
            env_digest: report.env_digest.as_deref(),
            threads: rayon::current_num_threads(),
            outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_file(&path, &text)?;
    }

    match &report.failure {
        Some(msg) => {
            eprintln!("validation failed: {msg}");
            Ok(EXIT_VALIDATION)
        }
        None => Ok(0),
    }
}
