use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use pulse_core::cli::config::RunConfig;
use pulse_core::cli::report::{Bundle, CONVERGENCE_COLUMNS};
use pulse_core::cli::{check, run_cli, CliError};
use pulse_core::grape::{self, ControlProblem};
use pulse_core::penalty::from_polar;
use pulse_core::spinop::{commutation_superoperator, drift_liouvillian, Component, StateSpec};

fn template(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates").join(format!("{name}.toml"))
}

fn pulse(args: &[&str]) -> i32 {
    let mut all = vec!["pulse"];
    all.extend_from_slice(args);
    run_cli(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = r#"
seed = 3

[system]
isotopes = ["1H", "13C"]

[[system.couplings]]
i = 0
j = 1
hz = 140.0

[problem]
initial = ["Lz(0)"]
target = ["Lz(1)"]
slices = 6
duration = 0.005
power_hz = 200.0
controls = ["Lx(0)", "Ly(0)", "Lx(1)", "Ly(1)"]

[optimizer]
method = "bfgs"
max_iterations = 3
grad_inf_tol = 0.0
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|x| if x.is_empty() { f64::NAN } else { x.parse().unwrap() }).collect())
        .collect();
    (header, rows)
}

#[test]
fn run_writes_reports_with_exact_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("out");
    assert_eq!(pulse(&["--out-dir", s(&out), "run", s(&cfg)]), 0);

    let (header, rows) = read_csv(&out.join("convergence.csv"));
    assert_eq!(header, CONVERGENCE_COLUMNS);
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1) as f64);
        assert_eq!(r[9], 0.0);
    }
    let text = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert!(!text.contains('\r'));

    let rc = RunConfig::load(&cfg).unwrap();
    let (header, rows) = read_csv(&out.join("waveform.csv"));
    assert_eq!(&header[..6], ["slice_index", "time_s", "Lx(0)", "Ly(0)", "Lx(1)", "Ly(1)"]);
    assert_eq!(header.len(), 2 + 4 + 2 * 2);
    assert_eq!(rows.len(), 6);
    for (n, r) in rows.iter().enumerate() {
        assert!((r[1] - n as f64 * rc.dt).abs() < 1e-15);
        for p in 0..2 {
            let (x, y) = from_polar(r[6 + 2 * p], r[7 + 2 * p]);
            let (cx, cy) = (r[2 + 2 * p], r[3 + 2 * p]);
            assert!((x - cx).abs() <= 1e-12 * (1.0 + cx.abs()));
            assert!((y - cy).abs() <= 1e-12 * (1.0 + cy.abs()));
        }
    }

    // physical amplitudes are the bundle controls times the power in rad/s
    let b = Bundle::load(&out.join("bundle.json")).unwrap();
    assert!((rows[2][3] - b.controls.get(1, 2) * 2.0 * PI * 200.0).abs() < 1e-9);

    let (header, rows) = read_csv(&out.join("trajectory.csv"));
    assert_eq!(header.len(), 2 + 16);
    assert_eq!(rows.len(), 7);
    for r in &rows {
        let total: f64 = r[2..].iter().sum();
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("seed: 3"));
    assert!(summary.contains("iterations: 3"));
    assert!(summary.contains("termination: max_iterations"));
}

#[test]
fn zero_iterations_give_empty_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", &TOY.replace("max_iterations = 3", "max_iterations = 0"));
    let out = dir.path().join("out");
    assert_eq!(pulse(&["--out-dir", s(&out), "run", s(&cfg)]), 0);
    let text = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(text, format!("{}\n", CONVERGENCE_COLUMNS.join(",")));
    let (_, rows) = read_csv(&out.join("waveform.csv"));
    assert_eq!(rows.len(), 6);
    let b = Bundle::load(&out.join("bundle.json")).unwrap();
    assert_eq!(b.controls, RunConfig::load(&cfg).unwrap().initial_controls(3));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", &TOY.replace("max_iterations = 3", "max_iterations = 0"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(pulse(&["--out-dir", s(&a), "run", s(&cfg)]), 0);
    assert_eq!(pulse(&["--seed", "4", "--out-dir", s(&b), "run", s(&cfg)]), 0);
    let ba = Bundle::load(&a.join("bundle.json")).unwrap();
    let bb = Bundle::load(&b.join("bundle.json")).unwrap();
    assert_eq!(bb.seed, 4);
    assert_ne!(ba.controls, bb.controls);
}

#[test]
fn export_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(pulse(&["--out-dir", s(&a), "run", s(&cfg)]), 0);
    assert_eq!(pulse(&["--out-dir", s(&b), "export", s(&a.join("bundle.json"))]), 0);
    for f in ["convergence.csv", "waveform.csv", "trajectory.csv", "summary.txt", "bundle.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = s(&out);
    assert_eq!(pulse(&["--help"]), 0);
    assert_eq!(pulse(&["--version"]), 0);
    assert_eq!(pulse(&["frobnicate"]), 1);
    assert_eq!(pulse(&["run"]), 1);

    // configuration errors
    let bad = write_config(dir.path(), "bad.toml", &TOY.replace("slices = 6", "slices = 6\nslcies = 2"));
    assert_eq!(pulse(&["--out-dir", o, "run", s(&bad)]), 1);
    let bad = write_config(dir.path(), "bad2.toml", &TOY.replace("power_hz = 200.0", "power_hz = -1.0"));
    assert_eq!(pulse(&["--out-dir", o, "run", s(&bad)]), 1);
    let bad = write_config(dir.path(), "bad3.toml", "this is not toml");
    assert_eq!(pulse(&["--out-dir", o, "run", s(&bad)]), 1);
    assert_eq!(pulse(&["--out-dir", o, "--threads", "0", "check", s(&template("n14")), "--h", "0"]), 1);
    assert_eq!(pulse(&["check", s(&template("n14")), "--h", "-1e-6"]), 1);

    // optimization failure: a line search allowed a single evaluation
    let fail = write_config(
        dir.path(),
        "fail.toml",
        &TOY.replace("method = \"bfgs\"", "method = \"bfgs\"\nmax_ls_evals = 1")
            .replace("power_hz = 200.0", "power_hz = 5000.0"),
    );
    assert_eq!(pulse(&["--out-dir", o, "run", s(&fail)]), 2);
    let b = Bundle::load(&out.join("bundle.json")).unwrap();
    assert!(b.failure.unwrap().contains("line search"));
    // derivative check failure from a far too coarse step
    assert_eq!(pulse(&["check", s(&template("n14")), "--h", "0.3"]), 2);

    // I/O errors
    assert_eq!(pulse(&["run", s(&dir.path().join("missing.toml"))]), 3);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let toy = write_config(dir.path(), "toy.toml", TOY);
    assert_eq!(pulse(&["--out-dir", s(&blocker.join("sub")), "run", s(&toy)]), 3);
    assert_eq!(pulse(&["export", s(&dir.path().join("missing.json"))]), 3);

    assert_eq!(pulse(&["--out-dir", o, "run", s(&toy)]), 0);
}

#[test]
fn hcf_template_loads_and_round_trips() {
    let c = RunConfig::load(&template("hcf")).unwrap();
    assert_eq!(c.system.multiplicities, vec![2, 2, 2]);
    assert_eq!(c.system.couplings.len(), 2);
    assert!((c.system.couplings[0].strength - 2.0 * PI * 140.0).abs() < 1e-12);
    assert!((c.system.couplings[1].strength + 2.0 * PI * 160.0).abs() < 1e-12);
    assert!(c.system.couplings.iter().all(|k| k.truncated));
    assert_eq!(c.controls.len(), 6);
    assert_eq!(c.slices(), 50);
    assert!((c.dt * 50.0 - 0.1).abs() <= 1e-12 * 0.1);
    assert_eq!(c.power, 2.0 * PI * 1e4);
    assert_eq!(c.problem().unwrap().dim(), 64);
    let again = RunConfig::parse(&c.to_toml()).unwrap();
    assert_eq!(again.file, c.file);
}

#[test]
fn n14_template_loads() {
    let c = RunConfig::load(&template("n14")).unwrap();
    assert_eq!(c.system.multiplicities, vec![3]);
    let v = c.system.quadrupolar[0].tensor;
    for (i, hz) in [1e4, 2e4, -3e4].into_iter().enumerate() {
        assert!((v[(i, i)] - 2.0 * PI * hz).abs() < 1e-9);
    }
    assert!(c.phase_only());
    assert!((c.power - 2.0 * PI * 2f64.sqrt() * 4e4).abs() < 1e-6);
    assert!((c.dt * 100.0 - 150e-6).abs() <= 1e-12 * 150e-6);
    assert_eq!(c.problem().unwrap().dim(), 9);
    assert_eq!(RunConfig::parse(&c.to_toml()).unwrap().file, c.file);
}

#[test]
fn m2s_template_ppm_conversion() {
    let c = RunConfig::load(&template("m2s")).unwrap();
    // 13C at 11.7434 T by hand: nu0 = gamma B / 2 pi, offset = ppm 1e-6 nu0
    let nu0 = 6.728284e7 * 11.7434 / (2.0 * PI);
    let hz = 0.05e-6 * nu0;
    assert!((hz - 6.2877).abs() < 1e-3);
    assert!((c.system.offsets[0] - 2.0 * PI * hz).abs() <= 1e-12 * 2.0 * PI * hz);
    assert!((c.system.offsets[1] + 2.0 * PI * hz).abs() <= 1e-12 * 2.0 * PI * hz);
    assert!((c.system.couplings[0].strength - 2.0 * PI * 60.0).abs() < 1e-12);
    assert!(!c.system.couplings[0].truncated);
    assert!((c.dt * 100.0 - 0.05625).abs() <= 1e-12 * 0.05625);
    assert_eq!(c.problem().unwrap().dim(), 16);
}

#[test]
fn n14_run_reaches_bound_with_unit_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(pulse(&["--out-dir", s(&out), "run", s(&template("n14"))]), 0);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let field = |key: &str| -> String {
        summary
            .lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .trim()
            .to_string()
    };
    let f: f64 = field("final fidelity:").parse().unwrap();
    assert!(f >= 0.999 * FRAC_1_SQRT_2, "{f}");
    let steps: Vec<f64> = field("last step lengths:").split(' ').map(|x| x.parse().unwrap()).collect();
    assert_eq!(steps.last(), Some(&1.0));
}

#[test]
fn robust_summary_lists_member_fidelities() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(template("m2s_robust"))
        .unwrap()
        .replace("max_iterations = 200", "max_iterations = 2");
    let cfg_path = write_config(dir.path(), "robust.toml", &text);
    let out = dir.path().join("out");
    assert_eq!(pulse(&["--out-dir", s(&out), "run", s(&cfg_path)]), 0);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let b = Bundle::load(&out.join("bundle.json")).unwrap();
    let cfg = RunConfig::load(&cfg_path).unwrap();

    // member problems built directly from the operators
    let sys = &cfg.system;
    let drift = drift_liouvillian(sys).unwrap();
    let lz = commutation_superoperator(&(sys.op(0, Component::Z).unwrap() + sys.op(1, Component::Z).unwrap())).unwrap();
    let ops: Vec<_> = ["Lx(0,1)", "Ly(0,1)"]
        .iter()
        .map(|x| commutation_superoperator(&x.parse::<StateSpec>().unwrap().operator(sys).unwrap()).unwrap())
        .collect();
    let rho = "Lz(0,1)".parse::<StateSpec>().unwrap().build(sys).unwrap();
    let sigma = "singlet(0,1)".parse::<StateSpec>().unwrap().build(sys).unwrap();

    let lines: Vec<&str> = summary.lines().filter(|l| l.trim_start().starts_with("power_factor")).collect();
    assert_eq!(lines.len(), 15);
    let mut mean = 0.0;
    let mut i = 0;
    for pf in [0.8, 0.9, 1.0, 1.1, 1.2] {
        for off in [-5.0, 0.0, 5.0] {
            let d = &drift + &lz * Complex64::new(2.0 * PI * off, 0.0);
            let c: Vec<_> = ops.iter().map(|o| o * Complex64::new(pf, 0.0)).collect();
            let p = ControlProblem::new(d, c, vec![rho.clone()], vec![sigma.clone()], grape::FidelityKind::J1).unwrap();
            let f = grape::fidelity(&p, &b.controls).unwrap();
            let reported: f64 = lines[i].rsplit(' ').next().unwrap().parse().unwrap();
            assert!((reported - f).abs() < 1e-10, "member {i}: {reported} vs {f}");
            mean += f / 15.0;
            i += 1;
        }
    }
    let reported: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("weighted mean fidelity:"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((reported - mean).abs() < 1e-10);
}

#[test]
fn check_passes_on_templates_and_rejects_bad_steps() {
    let hcf = RunConfig::load(&template("hcf")).unwrap();
    let r = check(&hcf, 1, 1e-6).unwrap();
    assert!(r.passed(), "{r}");
    let n14 = RunConfig::load(&template("n14")).unwrap();
    assert!(check(&n14, 5, 1e-6).unwrap().passed());
    for h in [0.0, -1e-6, f64::NAN] {
        assert!(matches!(check(&n14, 1, h), Err(CliError::Config(_))));
    }
}

#[test]
fn check_j2_two_slices() {
    let text = TOY.replace("slices = 6", "slices = 2").replace("[problem]", "[problem]\nfidelity = \"J2\"");
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.file.problem.fidelity, grape::FidelityKind::J2);
    for seed in 0..4 {
        let r = check(&cfg, seed, 1e-6).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.hessian_block_off_diagonal < 1e-5);
    }
}
