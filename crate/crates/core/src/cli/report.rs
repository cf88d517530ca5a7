//! Report files: convergence, waveform and trajectory CSVs, a text summary
//! and a JSON bundle from which the reports can be regenerated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ConfigFile, RunConfig};
use super::CliError;
use crate::grape::{self, ensemble_evaluate, ControlSet, Order};
use crate::optim::{Termination, TraceRow};
use crate::penalty::{self, to_polar};

/// Everything needed to regenerate the reports of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bundle {
    pub config: ConfigFile,
    pub seed: u64,
    pub controls: ControlSet,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    pub failure: Option<String>,
}

impl Bundle {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub convergence: PathBuf,
    pub waveform: PathBuf,
    pub trajectory: PathBuf,
    pub summary: PathBuf,
    pub bundle: PathBuf,
}

impl ReportFiles {
    pub fn in_dir(dir: &Path, cfg: &RunConfig) -> Self {
        let o = &cfg.file.output;
        ReportFiles {
            convergence: dir.join(&o.convergence),
            waveform: dir.join(&o.waveform),
            trajectory: dir.join(&o.trajectory),
            summary: dir.join(&o.summary),
            bundle: dir.join(&o.bundle),
        }
    }
}

pub const CONVERGENCE_COLUMNS: [&str; 10] = [
    "iteration",
    "fidelity",
    "penalty",
    "objective",
    "grad_inf_norm",
    "step_length",
    "ls_evals",
    "reg_iters",
    "cond_number",
    "wall_ms",
];

fn csv_writer(out: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Convergence table; one row per iteration, the starting point excluded.
pub fn convergence_csv(trace: &[TraceRow]) -> Result<String, CliError> {
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(CONVERGENCE_COLUMNS).map_err(csv_err)?;
        for t in trace.iter().filter(|t| t.iteration > 0) {
            w.write_record([
                t.iteration.to_string(),
                num(t.fidelity),
                num(t.penalty),
                num(t.objective),
                num(t.grad_inf_norm),
                num(t.step_length),
                t.ls_evals.to_string(),
                t.reg_iters.to_string(),
                t.cond_number.map(num).unwrap_or_default(),
                num(t.wall_ms),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("ascii"))
}

/// Physical amplitudes in rad/s per channel, then amplitude and phase of
/// each `(x, y)` pair.
pub fn waveform_csv(cfg: &RunConfig, c: &ControlSet) -> Result<String, CliError> {
    let mut header = vec!["slice_index".to_string(), "time_s".to_string()];
    header.extend(cfg.controls.iter().map(|s| s.to_string()));
    for (x, y) in &cfg.pairs {
        let name = format!("{}/{}", cfg.controls[*x], cfg.controls[*y]);
        header.push(format!("r[{name}]"));
        header.push(format!("phi[{name}]"));
    }
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(&header).map_err(csv_err)?;
        for n in 0..c.slices() {
            let mut row = vec![n.to_string(), num(n as f64 * c.dt)];
            row.extend((0..c.controls()).map(|k| num(c.get(k, n) * c.power)));
            for &(x, y) in &cfg.pairs {
                let (r, phi) = to_polar(c.get(x, n) * c.power, c.get(y, n) * c.power);
                row.push(num(r));
                row.push(num(phi));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("ascii"))
}

/// Squared magnitudes of the forward state of the first member and pair.
pub fn trajectory_csv(cfg: &RunConfig, c: &ControlSet) -> Result<String, CliError> {
    let members = cfg.ensemble()?;
    let t = grape::trajectories(&members[0].1, c).map_err(|e| CliError::Optim(e.to_string()))?;
    let rho = &t.forward[0];
    let dim = rho[0].len();
    let mut header = vec!["slice_index".to_string(), "time_s".to_string()];
    header.extend((0..dim).map(|i| format!("p{i}")));
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(&header).map_err(csv_err)?;
        for (n, v) in rho.iter().enumerate() {
            let mut row = vec![n.to_string(), num(n as f64 * c.dt)];
            row.extend(v.iter().map(|z| num(z.norm_sqr())));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(String::from_utf8(buf).expect("ascii"))
}

/// Fidelity of each ensemble member at `c`, in configuration order.
pub fn member_fidelities(cfg: &RunConfig, c: &ControlSet) -> Result<Vec<f64>, CliError> {
    cfg.ensemble()?
        .iter()
        .map(|(_, p)| {
            grape::fidelity(p, c).map_err(|e| CliError::Optim(e.to_string()))
        })
        .collect()
}

pub fn summary(cfg: &RunConfig, b: &Bundle) -> Result<String, CliError> {
    let members = cfg.ensemble()?;
    let fin = ensemble_evaluate(&members, &b.controls, Order::Value).map_err(|e| CliError::Optim(e.to_string()))?;
    let pen = penalty::total(cfg.penalties(), &b.controls).map_err(|e| CliError::Optim(e.to_string()))?;
    let per = member_fidelities(cfg, &b.controls)?;
    let total: f64 = cfg.members.iter().map(|m| m.weight).sum();
    let mean: f64 = cfg.members.iter().zip(&per).map(|(m, f)| m.weight / total * f).sum();
    let mut s = String::new();
    let iterations = b.trace.last().map_or(0, |t| t.iteration);
    writeln!(s, "seed: {}", b.seed).unwrap();
    writeln!(s, "fidelity kind: {:?}", cfg.file.problem.fidelity).unwrap();
    writeln!(s, "method: {}", serde_json::to_string(&cfg.optimizer().method).unwrap().trim_matches('"')).unwrap();
    writeln!(s, "termination: {}", serde_json::to_string(&b.termination).unwrap().trim_matches('"')).unwrap();
    writeln!(s, "iterations: {iterations}").unwrap();
    if let Some(t) = b.trace.first() {
        writeln!(s, "initial fidelity: {:.12}", t.fidelity).unwrap();
    }
    writeln!(s, "final fidelity: {:.12}", fin.fidelity()).unwrap();
    writeln!(s, "final penalty: {:.12e}", pen.value).unwrap();
    writeln!(s, "final objective: {:.12}", fin.fidelity() - pen.value).unwrap();
    if let Some(t) = b.trace.last() {
        writeln!(s, "final gradient inf-norm: {:.6e}", t.grad_inf_norm).unwrap();
    }
    let steps: Vec<String> = b
        .trace
        .iter()
        .filter(|t| t.iteration > 0)
        .rev()
        .take(5)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .map(|t| format!("{}", t.step_length))
        .collect();
    writeln!(s, "last step lengths: {}", steps.join(" ")).unwrap();
    writeln!(s, "members: {}", per.len()).unwrap();
    for (m, f) in cfg.members.iter().zip(&per) {
        writeln!(
            s,
            "  power_factor {} offset_hz {} weight {}: fidelity {:.12}",
            m.power_factor, m.offset_hz, m.weight, f
        )
        .unwrap();
    }
    writeln!(s, "weighted mean fidelity: {mean:.12}").unwrap();
    writeln!(s, "failure: {}", b.failure.as_deref().unwrap_or("none")).unwrap();
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes all report files into `dir`, creating it if needed.
pub fn write_reports(dir: &Path, cfg: &RunConfig, b: &Bundle) -> Result<ReportFiles, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let files = ReportFiles::in_dir(dir, cfg);
    write(&files.convergence, &convergence_csv(&b.trace)?)?;
    write(&files.waveform, &waveform_csv(cfg, &b.controls)?)?;
    write(&files.trajectory, &trajectory_csv(cfg, &b.controls)?)?;
    write(&files.summary, &summary(cfg, b)?)?;
    let json = serde_json::to_string_pretty(b).map_err(|e| CliError::Io(e.to_string()))?;
    write(&files.bundle, &json)?;
    Ok(files)
}
