use super::*;
use crate::matexp::prop_derivative;
use crate::spinop::{commutation_superoperator, drift_liouvillian, Component, Coupling, Relaxation, SpinSystem, StateSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn state(sys: &SpinSystem, s: &str) -> CVec {
    s.parse::<StateSpec>().unwrap().build(sys).unwrap()
}

fn control(sys: &SpinSystem, spin: usize, comp: Component) -> CMat {
    commutation_superoperator(&sys.op(spin, comp).unwrap()).unwrap()
}

/// Two coupled spin-1/2 with three controls and random settings.
fn random_problem(seed: u64, kind: FidelityKind, relax: bool, pairs: usize) -> (ControlProblem, ControlSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sys = SpinSystem::new(vec![2, 2]).unwrap();
    sys.offsets = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
    sys.couplings = vec![Coupling { i: 0, j: 1, strength: rng.gen_range(-2.0..2.0), truncated: false }];
    if relax {
        sys.relaxation = Some(Relaxation { r1: 0.2, r2: 0.5 });
    }
    let drift = drift_liouvillian(&sys).unwrap();
    let controls = vec![
        control(&sys, 0, Component::X),
        control(&sys, 0, Component::Y),
        control(&sys, 1, Component::X),
    ];
    let all = [("Lz(0)", "Lx(1)"), ("T11(0)", "T11(1)"), ("Lx(0,1)", "singlet(0,1)")];
    let init = all.iter().take(pairs).map(|p| state(&sys, p.0)).collect();
    let targ = all.iter().take(pairs).map(|p| state(&sys, p.1)).collect();
    let problem = ControlProblem::new(drift, controls, init, targ, kind).unwrap();
    let ns = 4;
    let amps = (0..3 * ns).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cs = ControlSet::from_flat(3, ns, 0.3, 1.5, amps).unwrap();
    (problem, cs)
}

fn value(p: &ControlProblem, cs: &ControlSet) -> Complex64 {
    evaluate(p, cs, Order::Value).unwrap().value
}

fn shifted(cs: &ControlSet, i: usize, h: f64) -> ControlSet {
    let mut x = cs.flat().to_vec();
    x[i] += h;
    cs.with_flat(x).unwrap()
}

fn fd_gradient(p: &ControlProblem, cs: &ControlSet, h: f64) -> Vec<Complex64> {
    (0..cs.len())
        .map(|i| (value(p, &shifted(cs, i, h)) - value(p, &shifted(cs, i, -h))) / (2.0 * h))
        .collect()
}

fn close(a: f64, f: f64, rel: f64) -> bool {
    (a - f).abs() <= rel * f.abs() || (f.abs() < 1e-3 && (a - f).abs() <= 1e-9)
}

#[test]
fn control_set_layout_round_trips() {
    let ch = vec![vec![1.0, 2.0, 3.0], vec![-1.0, -2.0, -3.0]];
    let cs = ControlSet::from_channels(&ch, 0.1, 5.0).unwrap();
    assert_eq!(cs.flat(), &[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]);
    assert_eq!(cs.channels(), ch);
    assert_eq!(cs.get(1, 2), -3.0);
    assert_eq!(cs.index(1, 2), 5);
    let again = ControlSet::from_flat(2, 3, 0.1, 5.0, cs.flat().to_vec()).unwrap();
    assert_eq!(again, cs);
    assert!((cs.duration() - 0.3).abs() < 1e-15);
    assert!(ControlSet::zeros(0, 3, 0.1, 1.0).is_err());
    assert!(ControlSet::zeros(1, 3, 0.0, 1.0).is_err());
    assert!(ControlSet::zeros(1, 3, 0.1, -1.0).is_err());
    assert!(ControlSet::from_flat(1, 3, 0.1, 1.0, vec![0.0; 2]).is_err());
}

#[test]
fn problem_validation() {
    let sys = SpinSystem::new(vec![2]).unwrap();
    let z = state(&sys, "Lz(0)");
    let l = control(&sys, 0, Component::X);
    let drift = CMat::zeros(4, 4);
    let bad = &z * c(2.0);
    assert!(matches!(
        ControlProblem::new(drift.clone(), vec![l.clone()], vec![bad], vec![z.clone()], FidelityKind::J1),
        Err(GrapeError::NotNormalized { .. })
    ));
    assert!(ControlProblem::new(drift.clone(), vec![], vec![z.clone()], vec![z.clone()], FidelityKind::J1).is_err());
    assert!(ControlProblem::new(drift.clone(), vec![CMat::zeros(3, 3)], vec![z.clone()], vec![z.clone()], FidelityKind::J1).is_err());
    assert!(ControlProblem::new(drift, vec![l], vec![z.clone()], vec![], FidelityKind::J1).is_err());
}

#[test]
fn commutes_table() {
    let sys = SpinSystem::new(vec![2, 2]).unwrap();
    let ops = vec![
        control(&sys, 0, Component::X),
        control(&sys, 0, Component::Y),
        control(&sys, 1, Component::X),
    ];
    let z = state(&sys, "Lz(0)");
    let p = ControlProblem::new(CMat::zeros(16, 16), ops, vec![z.clone()], vec![z], FidelityKind::J1).unwrap();
    let t = p.commutes();
    assert!(t[0][0] && t[0][2] && t[2][0]);
    assert!(!t[0][1] && !t[1][0]);
    assert!(p.uses_real_arithmetic());
}

#[test]
fn zero_controls_give_drift_propagator() {
    let (p, cs) = random_problem(1, FidelityKind::J1, false, 1);
    let zero = ControlSet::zeros(3, 2, cs.dt, cs.power).unwrap();
    let prop = slice_propagator(&p, &zero, 1).unwrap();
    let want = crate::matexp::expm(&(p.drift() * (-I * cs.dt)), &ExpOptions::default()).unwrap();
    assert!((&prop - want).camax() < 1e-12);
    let u = prop.adjoint() * &prop;
    assert!((u - CMat::identity(16, 16)).camax() < 1e-11);
    assert!(matches!(slice_propagator(&p, &zero, 2), Err(GrapeError::SliceOutOfRange { .. })));
}

#[test]
fn diagonal_generator_phases() {
    let sys = SpinSystem::new(vec![2]).unwrap();
    let lz = control(&sys, 0, Component::Z);
    let z = state(&sys, "Lz(0)");
    let p = ControlProblem::new(CMat::zeros(4, 4), vec![lz.clone()], vec![z.clone()], vec![z], FidelityKind::J1).unwrap();
    let cs = ControlSet::from_flat(1, 1, 0.01, 100.0, vec![0.7]).unwrap();
    let prop = slice_propagator(&p, &cs, 0).unwrap();
    let theta = 100.0 * 0.7 * 0.01;
    for i in 0..4 {
        let want = (-I * lz[(i, i)] * theta).exp();
        assert!((prop[(i, i)] - want).norm() < 1e-13, "{i} {} {}", prop[(i, i)], want);
    }
    assert!((prop[(1, 1)] - (I * theta).exp()).norm() < 1e-13);
}

#[test]
fn bloch_rotation_reaches_target() {
    let sys = SpinSystem::new(vec![2]).unwrap();
    let ly = control(&sys, 0, Component::Y);
    let p = ControlProblem::new(
        CMat::zeros(4, 4),
        vec![ly],
        vec![state(&sys, "Lz(0)")],
        vec![state(&sys, "Lx(0)")],
        FidelityKind::J1,
    )
    .unwrap();
    let power = 2.0 * PI * 1e3;
    let dt = 1e-4;
    let amp = (PI / 2.0) / (power * dt);
    let cs = ControlSet::from_flat(1, 1, dt, power, vec![amp]).unwrap();
    assert!((fidelity(&p, &cs).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn identity_problem_has_unit_fidelity() {
    let sys = SpinSystem::new(vec![2, 2]).unwrap();
    let s = state(&sys, "Lx(0,1)");
    let p = ControlProblem::new(CMat::zeros(16, 16), vec![control(&sys, 0, Component::X)], vec![s.clone()], vec![s.clone()], FidelityKind::J1).unwrap();
    let cs = ControlSet::zeros(1, 1, 0.1, 1.0).unwrap();
    assert!((fidelity(&p, &cs).unwrap() - 1.0).abs() < 1e-15);
    let t = trajectories(&p, &cs).unwrap();
    assert!((&t.forward[0][1] - &s).norm() < 1e-15);
    assert!((&t.backward[0][0] - &s).norm() < 1e-15);
}

#[test]
fn trajectories_agree_with_dense_engine_and_telescope() {
    for complex in [false, true] {
        let (p, cs) = random_problem(2, FidelityKind::J0, false, 2);
        let p = if complex { p.with_complex_arithmetic() } else { p };
        let t = trajectories(&p, &cs).unwrap();
        let b = gradient(&p, &cs).unwrap();
        for q in 0..2 {
            for n in 0..=cs.slices() {
                assert!((&t.forward[q][n] - &b.forward[q][n]).camax() < 1e-12);
                assert!((&t.backward[q][n] - &b.backward[q][n]).camax() < 1e-12);
                assert!((t.forward[q][n].norm() - 1.0).abs() < 1e-10);
            }
            let props: Vec<CMat> = (0..cs.slices()).map(|n| slice_propagator(&p, &cs, n).unwrap()).collect();
            let f = b.overlaps[q];
            for n in 0..cs.slices() {
                let o = crate::linalg::cdot(&t.backward[q][n + 1], &(&props[n] * &t.forward[q][n]));
                assert!((o - f).norm() < 1e-10);
            }
        }
    }
}

#[test]
fn relaxation_decays_coherences() {
    let mut sys = SpinSystem::new(vec![2]).unwrap();
    sys.relaxation = Some(Relaxation { r1: 3.0, r2: 7.0 });
    let drift = drift_liouvillian(&sys).unwrap();
    let x = state(&sys, "Lx(0)");
    let p = ControlProblem::new(drift, vec![control(&sys, 0, Component::X)], vec![x.clone()], vec![x], FidelityKind::J1).unwrap();
    let cs = ControlSet::zeros(1, 5, 0.02, 1.0).unwrap();
    let f = fidelity(&p, &cs).unwrap();
    assert!((f - (-7.0f64 * 0.1).exp()).abs() < 1e-10);
    assert!(p.uses_real_arithmetic());
}

#[test]
fn zero_sensitivity_gradient() {
    let mut sys = SpinSystem::new(vec![2]).unwrap();
    sys.offsets = vec![5.0];
    let drift = drift_liouvillian(&sys).unwrap();
    let z = state(&sys, "Lz(0)");
    let p = ControlProblem::new(drift, vec![control(&sys, 0, Component::Z)], vec![z.clone()], vec![z], FidelityKind::J1).unwrap();
    let cs = ControlSet::from_flat(1, 3, 0.1, 2.0, vec![0.3, -0.2, 0.9]).unwrap();
    let b = hessian(&p, &cs).unwrap();
    assert!(b.gradient.iter().all(|g| g.abs() < 1e-12));
    assert!(b.hessian.unwrap().amax() < 1e-12);
}

#[test]
fn j2_gradient_is_chain_rule_of_j1_for_real_overlap() {
    let (p, cs) = random_problem(3, FidelityKind::J1, false, 1);
    let b1 = gradient(&p, &cs).unwrap();
    let b2 = gradient(&p.with_kind(FidelityKind::J2), &cs).unwrap();
    assert!(b1.overlaps[0].im.abs() < 1e-14);
    let j1 = b1.fidelity();
    for (g1, g2) in b1.gradient.iter().zip(&b2.gradient) {
        assert!((g2 - 2.0 * j1 * g1).abs() < 1e-10);
    }
}

#[test]
fn real_and_complex_engines_agree() {
    for kind in [FidelityKind::J0, FidelityKind::J1, FidelityKind::J2] {
        let (p, cs) = random_problem(4, kind, true, 2);
        assert!(p.uses_real_arithmetic());
        let a = hessian(&p, &cs).unwrap();
        let b = hessian(&p.with_complex_arithmetic(), &cs).unwrap();
        assert!((a.value - b.value).norm() < 1e-12);
        for (x, y) in a.gradient.iter().zip(&b.gradient) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.hessian.unwrap() - b.hessian.unwrap()).amax() < 1e-11);
    }
}

#[test]
fn gradient_and_hessian_modes_share_values() {
    let (p, cs) = random_problem(5, FidelityKind::J1, false, 2);
    let v = evaluate(&p, &cs, Order::Value).unwrap();
    let g = evaluate(&p, &cs, Order::Gradient).unwrap();
    let h = evaluate(&p, &cs, Order::Hessian).unwrap();
    assert_eq!(v.value, g.value);
    assert_eq!(v.value, h.value);
    for (a, b) in g.gradient.iter().zip(&h.gradient) {
        assert!((a - b).abs() < 1e-13);
    }
    assert_eq!(h.counters.propagators, cs.slices());
}

#[test]
fn off_diagonal_blocks_match_explicit_products() {
    let (p, cs) = random_problem(6, FidelityKind::J0, false, 1);
    let b = hessian(&p, &cs).unwrap();
    let h = b.complex_hessian.unwrap();
    let nk = cs.controls();
    let ns = cs.slices();
    let opts = ExpOptions::default();
    let gens: Vec<CMat> = (0..ns)
        .map(|n| slice_generator(&p, &cs, n).unwrap() * (I / cs.dt))
        .collect();
    let props: Vec<CMat> = (0..ns).map(|n| slice_propagator(&p, &cs, n).unwrap()).collect();
    let deriv = |n: usize, k: usize| {
        let hk = &p.control_operators()[k] * c(cs.power);
        prop_derivative(&gens[n], &hk, cs.dt, &opts).unwrap().1
    };
    let rho0 = &p.initial_states()[0];
    let sigma = &p.target_states()[0];
    let mut worst = 0.0f64;
    for m in 0..ns {
        for n in m + 1..ns {
            for k in 0..nk {
                for j in 0..nk {
                    let mut v = rho0.clone();
                    for l in 0..m {
                        v = &props[l] * v;
                    }
                    v = deriv(m, j) * v;
                    for l in m + 1..n {
                        v = &props[l] * v;
                    }
                    v = deriv(n, k) * v;
                    for l in n + 1..ns {
                        v = &props[l] * v;
                    }
                    let want = crate::linalg::cdot(sigma, &v);
                    let got = h[(n * nk + k, m * nk + j)];
                    worst = worst.max((got - want).norm());
                }
            }
        }
    }
    assert!(worst < 1e-11, "worst {worst}");
}

#[test]
fn single_slice_single_control_hessian() {
    let sys = SpinSystem::new(vec![2]).unwrap();
    let mut s = sys.clone();
    s.offsets = vec![1.3];
    let p = ControlProblem::new(
        drift_liouvillian(&s).unwrap(),
        vec![control(&sys, 0, Component::X)],
        vec![state(&sys, "Lz(0)")],
        vec![state(&sys, "Ly(0)")],
        FidelityKind::J1,
    )
    .unwrap();
    let cs = ControlSet::from_flat(1, 1, 0.5, 2.0, vec![0.4]).unwrap();
    let h = hessian(&p, &cs).unwrap().hessian.unwrap();
    let step = 1e-4;
    let f = |x: f64| fidelity(&p, &cs.with_flat(vec![x]).unwrap()).unwrap();
    let fd = (f(0.4 + step) - 2.0 * f(0.4) + f(0.4 - step)) / (step * step);
    assert!((h[(0, 0)] - fd).abs() < 1e-5 * fd.abs());
}

#[test]
fn multi_state_gradient_is_mean_of_pairs() {
    let (p, cs) = random_problem(7, FidelityKind::J1, false, 3);
    let all = gradient(&p, &cs).unwrap();
    let mut mean = vec![0.0; cs.len()];
    for q in 0..3 {
        let single = ControlProblem::new(
            p.drift().clone(),
            p.control_operators().to_vec(),
            vec![p.initial_states()[q].clone()],
            vec![p.target_states()[q].clone()],
            FidelityKind::J1,
        )
        .unwrap();
        let g = gradient(&single, &cs).unwrap();
        for (m, x) in mean.iter_mut().zip(&g.gradient) {
            *m += x / 3.0;
        }
    }
    for (a, b) in all.gradient.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let (p, cs) = random_problem(8, FidelityKind::J2, true, 2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| hessian(&p, &cs).unwrap())
    };
    let a = run(1);
    let b = run(3);
    let c = run(3);
    assert_eq!(a.value, b.value);
    assert_eq!(a.gradient, b.gradient);
    assert_eq!(a.hessian, b.hessian);
    assert_eq!(b.hessian, c.hessian);
}

#[test]
fn ensemble_averages() {
    let (p, cs) = random_problem(9, FidelityKind::J1, false, 1);
    let direct = hessian(&p, &cs).unwrap();
    let single = ensemble_evaluate(&[(1.0, p.clone())], &cs, Order::Hessian).unwrap();
    assert_eq!(direct.gradient, single.gradient);
    let pair = ensemble_evaluate(&[(0.5, p.clone()), (0.5, p.clone())], &cs, Order::Hessian).unwrap();
    assert!((pair.value - direct.value).norm() < 1e-12);
    for (a, b) in pair.gradient.iter().zip(&direct.gradient) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((pair.hessian.unwrap() - direct.hessian.unwrap()).amax() < 1e-12);

    let factors = [0.75, 0.875, 1.0, 1.125, 1.25];
    let weights = [1.0, 2.0, 3.0, 2.0, 1.0];
    let members: Vec<(f64, ControlProblem)> = factors
        .iter()
        .zip(&weights)
        .map(|(f, w)| (*w, p.with_power_scale(*f).unwrap()))
        .collect();
    let avg = ensemble_evaluate(&members, &cs, Order::Gradient).unwrap();
    let mut want = vec![0.0; cs.len()];
    for (f, w) in factors.iter().zip(&weights) {
        let g = gradient(&p.with_power_scale(*f).unwrap(), &cs).unwrap();
        for (a, b) in want.iter_mut().zip(&g.gradient) {
            *a += w / 9.0 * b;
        }
    }
    for (a, b) in avg.gradient.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(ensemble_evaluate(&[], &cs, Order::Value).unwrap_err(), GrapeError::EmptyEnsemble);
    assert!(matches!(
        ensemble_evaluate(&[(0.0, p)], &cs, Order::Value),
        Err(GrapeError::InvalidWeight(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..10_000, k in 0usize..3, relax in any::<bool>(), pairs in 1usize..=2) {
        let kind = [FidelityKind::J0, FidelityKind::J1, FidelityKind::J2][k];
        let (p, cs) = random_problem(seed, kind, relax, pairs);
        let b = gradient(&p, &cs).unwrap();
        let fd = fd_gradient(&p, &cs, 1e-6);
        let analytic: Vec<Complex64> = match &b.complex_gradient {
            Some(g) => g.clone(),
            None => b.gradient.iter().map(|&x| c(x)).collect(),
        };
        for (a, f) in analytic.iter().zip(&fd) {
            prop_assert!(close(a.re, f.re, 1e-6), "{a} vs {f}");
            prop_assert!(close(a.im, f.im, 1e-6), "{a} vs {f}");
        }
    }

    #[test]
    fn hessian_matches_gradient_differences(seed in 0u64..10_000, k in 0usize..3, relax in any::<bool>(), pairs in 1usize..=2) {
        let kind = [FidelityKind::J0, FidelityKind::J1, FidelityKind::J2][k];
        let (p, cs) = random_problem(seed, kind, relax, pairs);
        let h = hessian(&p, &cs).unwrap().hessian.unwrap();
        prop_assert!((&h - h.transpose()).amax() < 1e-10);
        let step = 1e-5;
        for i in 0..cs.len() {
            let gp = gradient(&p, &shifted(&cs, i, step)).unwrap().gradient;
            let gm = gradient(&p, &shifted(&cs, i, -step)).unwrap().gradient;
            for j in 0..cs.len() {
                let fd = (gp[j] - gm[j]) / (2.0 * step);
                prop_assert!(close(h[(j, i)], fd, 1e-5), "({j},{i}) {} vs {fd}", h[(j, i)]);
            }
        }
    }

    #[test]
    fn unitary_trajectories_conserve_norm(seed in 0u64..10_000) {
        let (p, cs) = random_problem(seed, FidelityKind::J1, false, 2);
        let b = gradient(&p, &cs).unwrap();
        for traj in b.forward.iter().chain(b.backward.iter()) {
            for v in traj {
                prop_assert!((v.norm() - 1.0).abs() < 1e-10);
            }
        }
    }
}
