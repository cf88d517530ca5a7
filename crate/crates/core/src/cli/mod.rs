//! Command-line front end: `run`, `check` and `export`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 optimization or
//! derivative-check failure, 3 I/O error.

pub mod config;
pub mod isotopes;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::grape::{ensemble_evaluate, ControlSet, Order};
use crate::optim::{optimize_controls, OptimError};
use config::RunConfig;
use report::{write_reports, Bundle, ReportFiles};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("optimization failed: {0}")]
    Optim(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Optim(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<OptimError> for CliError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::Config(m) => CliError::Config(m),
            e => CliError::Optim(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pulse", version, about = "Newton-GRAPE optimal control for spin systems")]
pub struct Cli {
    /// Seed for the initial controls; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for derivative evaluation.
    #[arg(long, global = true, env = "PULSE_THREADS")]
    pub threads: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize controls and write reports.
    Run { config: PathBuf },
    /// Compare analytic derivatives with central finite differences.
    Check {
        config: PathBuf,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-6, allow_negative_numbers = true)]
        h: f64,
    },
    /// Regenerate reports from a saved bundle.
    Export { bundle: PathBuf },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut out = Vec::new();
    let result = execute(&cli, &mut out);
    print!("{}", String::from_utf8_lossy(&out));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command, writing progress to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    let (code, text) = pool.install(|| -> Result<(i32, String), CliError> {
        match &cli.command {
            Command::Run { config } => {
                let cfg = RunConfig::load(config)?;
                let seed = cli.seed.unwrap_or(cfg.file.seed);
                let dir = out_dir(cli, &cfg);
                let (files, bundle) = run(&cfg, seed, &dir)?;
                let text = std::fs::read_to_string(&files.summary).map_err(|e| CliError::Io(e.to_string()))?;
                Ok((if bundle.failure.is_some() { 2 } else { 0 }, text))
            }
            Command::Check { config, h } => {
                let cfg = RunConfig::load(config)?;
                let seed = cli.seed.unwrap_or(cfg.file.seed);
                let r = check(&cfg, seed, *h)?;
                Ok((if r.passed() { 0 } else { 2 }, r.to_string()))
            }
            Command::Export { bundle } => {
                let b = Bundle::load(bundle)?;
                let cfg = RunConfig::from_file(b.config.clone())?;
                let dir = out_dir(cli, &cfg);
                write_reports(&dir, &cfg, &b)?;
                Ok((0, format!("reports written to {}\n", dir.display())))
            }
        }
    })?;
    let _ = write!(out, "{text}");
    Ok(code)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.file.output.dir))
}

/// Optimizes from the seeded controls and writes the reports into `dir`.
/// An optimizer failure is recorded in the bundle, not returned as an error.
pub fn run(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<(ReportFiles, Bundle), CliError> {
    let c0 = cfg.initial_controls(seed);
    let mut obj = cfg.objective(&c0)?;
    let (controls, r) = optimize_controls(&mut obj, &c0, cfg.optimizer())?;
    let bundle = Bundle {
        config: cfg.file.clone(),
        seed,
        controls,
        trace: r.trace,
        termination: r.termination,
        failure: r.failure.map(|e| e.to_string()),
    };
    let files = write_reports(dir, cfg, &bundle)?;
    Ok((files, bundle))
}

/// Norm-wise relative errors of the analytic derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub h: f64,
    pub variables: usize,
    pub gradient: f64,
    pub hessian_diagonal: f64,
    pub hessian_block_diagonal: f64,
    pub hessian_block_off_diagonal: f64,
}

pub const GRADIENT_TOL: f64 = 1e-6;
pub const HESSIAN_TOL: f64 = 1e-5;

impl CheckReport {
    pub fn hessian(&self) -> f64 {
        self.hessian_diagonal
            .max(self.hessian_block_diagonal)
            .max(self.hessian_block_off_diagonal)
    }

    pub fn passed(&self) -> bool {
        self.gradient < GRADIENT_TOL && self.hessian() < HESSIAN_TOL
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mark = |e: f64, tol: f64| if e < tol { "ok" } else { "FAIL" };
        writeln!(f, "variables: {}, h = {:e}", self.variables, self.h)?;
        writeln!(f, "gradient                    {:.3e} {}", self.gradient, mark(self.gradient, GRADIENT_TOL))?;
        for (name, e) in [
            ("hessian diagonal", self.hessian_diagonal),
            ("hessian block-diagonal", self.hessian_block_diagonal),
            ("hessian block-off-diagonal", self.hessian_block_off_diagonal),
        ] {
            writeln!(f, "{name:<28}{e:.3e} {}", mark(e, HESSIAN_TOL))?;
        }
        writeln!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn rel(diff: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        diff / reference
    } else {
        diff
    }
}

/// Analytic ensemble fidelity derivatives at the seeded Cartesian controls
/// against central differences of the value (gradient) and of the analytic
/// gradient (Hessian).
pub fn check(cfg: &RunConfig, seed: u64, h: f64) -> Result<CheckReport, CliError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(CliError::Config(format!("h: step {h} must be positive")));
    }
    let c0 = cfg.initial_controls(seed);
    let members = cfg.ensemble()?;
    let eval = |c: &ControlSet, order| ensemble_evaluate(&members, c, order).map_err(|e| CliError::Optim(e.to_string()));
    let b = eval(&c0, Order::Hessian)?;
    let ha = b.hessian.expect("hessian order");
    let n = c0.len();
    let k = c0.controls();
    let shifted = |i: usize, d: f64| {
        let mut x = c0.flat().to_vec();
        x[i] += d;
        c0.with_flat(x).expect("same shape")
    };
    let mut g_fd = vec![0.0; n];
    let mut h_fd = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let p = eval(&shifted(i, h), Order::Gradient)?;
        let m = eval(&shifted(i, -h), Order::Gradient)?;
        g_fd[i] = (p.fidelity() - m.fidelity()) / (2.0 * h);
        for j in 0..n {
            h_fd[(j, i)] = (p.gradient[j] - m.gradient[j]) / (2.0 * h);
        }
    }
    let gd: f64 = b.gradient.iter().zip(&g_fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let gr: f64 = g_fd.iter().map(|f| f * f).sum::<f64>().sqrt();
    // [diagonal, block-diagonal, block-off-diagonal] as (diff^2, ref^2)
    let mut acc = [(0.0, 0.0); 3];
    for i in 0..n {
        for j in 0..n {
            let block = if i == j {
                0
            } else if i / k == j / k {
                1
            } else {
                2
            };
            acc[block].0 += (ha[(i, j)] - h_fd[(i, j)]).powi(2);
            acc[block].1 += h_fd[(i, j)].powi(2);
        }
    }
    let e = |b: usize| rel(acc[b].0.sqrt(), acc[b].1.sqrt());
    Ok(CheckReport {
        h,
        variables: n,
        gradient: rel(gd, gr),
        hessian_diagonal: e(0),
        hessian_block_diagonal: e(1),
        hessian_block_off_diagonal: e(2),
    })
}
