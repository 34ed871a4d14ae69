mod common;

use std::sync::OnceLock;

use gridphase::certify::{check_thm1, max_certified_subset, Theorem};
use gridphase::jacobian::{closed_form_sensitivities, full_classical_blocks, phaseless_blocks};
use gridphase::linalg::{rel_frobenius, wrap_angle};
use gridphase::netmodel::Network;
use gridphase::powerflow::{injections, solve_operating_point, StateVector};
use gridphase::retrieval::{integrate_angles, retrieve_direct_p, retrieve_direct_q, retrieve_ls_with_blocks};
use gridphase::sensitivity::PerturbationSample;
use gridphase::simkit::{noise_sweep, simulate_snapshot, NoiseSpec, SweepConfig};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

use common::{load, pq_inputs};

fn case14() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(|| load("case14"))
}

fn case30() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(|| load("case30"))
}

fn random_state(n: usize) -> impl Strategy<Value = StateVector> {
    (
        prop::collection::vec(-0.5f64..0.5, n),
        prop::collection::vec(0.85f64..1.15, n),
    )
        .prop_map(|(theta, v)| StateVector::new(theta, v).unwrap())
}

fn scale(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(1.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn angle_blocks_follow_from_magnitude_blocks_at_random_states(state in random_state(30)) {
        let net = case30();
        let [dp_dth, dp_dv, dq_dth, dq_dv] = full_classical_blocks(&net.admittance, &state);
        let (p, q) = injections(&net.admittance, &state);
        let (lp, lq) = phaseless_blocks(&state.v, &p, &q, &dp_dv, &dq_dv).unwrap();
        prop_assert!((&lp - &dp_dth).amax() <= 1e-10 * scale(&dp_dth));
        prop_assert!((&lq - &dq_dth).amax() <= 1e-10 * scale(&dq_dth));
    }

    #[test]
    fn uniform_angle_shift_changes_nothing(state in random_state(14), shift in -3.0f64..3.0) {
        let net = case14();
        let shifted = StateVector::new(
            state.theta.iter().map(|t| t + shift).collect(),
            state.v.iter().copied().collect(),
        ).unwrap();
        let (p0, q0) = injections(&net.admittance, &state);
        let (p1, q1) = injections(&net.admittance, &shifted);
        prop_assert!((&p1 - &p0).amax() < 1e-10 && (&q1 - &q0).amax() < 1e-10);
        let a = full_classical_blocks(&net.admittance, &state);
        let b = full_classical_blocks(&net.admittance, &shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).amax() <= 1e-10 * scale(x));
        }
    }

    #[test]
    fn closed_form_angle_blocks_follow_from_magnitude_blocks_for_compound_admittance(
        re in prop::collection::vec(-2.0f64..2.0, 9),
        im in prop::collection::vec(-5.0f64..5.0, 9),
        theta in prop::collection::vec(-3.0f64..3.0, 3),
        v in prop::collection::vec(0.8f64..1.2, 3),
    ) {
        let y = DMatrix::from_fn(3, 3, |i, k| Complex64::new(re[3 * i + k], im[3 * i + k]));
        let (theta, v) = (DVector::from_vec(theta), DVector::from_vec(v));
        let cs = closed_form_sensitivities(&y, &theta, &v).unwrap();
        let vc = DVector::from_fn(3, |i, _| Complex64::from_polar(v[i], theta[i]));
        let current = &y * &vc;
        let s = DVector::from_fn(3, |i, _| vc[i] * current[i].conj());
        let (lp, lq) = phaseless_blocks(
            &v,
            &s.map(|x| x.re),
            &s.map(|x| x.im),
            &cs.ds_dv.map(|x| x.re),
            &cs.ds_dv.map(|x| x.im),
        ).unwrap();
        let dp_dth = cs.ds_dtheta.map(|x| x.re);
        let dq_dth = cs.ds_dtheta.map(|x| x.im);
        prop_assert!((&lp - &dp_dth).amax() <= 1e-10 * scale(&dp_dth));
        prop_assert!((&lq - &dq_dth).amax() <= 1e-10 * scale(&dq_dth));
    }

    #[test]
    fn least_squares_residual_is_minimal(seed in any::<u64>(), sigma in 1e-3f64..0.1) {
        let net = case14();
        let state = solve_operating_point(net).unwrap();
        let sim = simulate_snapshot(net, &state, &NoiseSpec::new(sigma, 0.0, seed).unwrap()).unwrap();
        let x = pq_inputs(net, &state);
        let mut pert = sim.perturbation();
        let mut r = gridphase::rng::stream(seed, 7);
        pert.dp += gridphase::rng::normal_vector(&mut r, pert.len(), sigma);
        pert.dq += gridphase::rng::normal_vector(&mut r, pert.len(), sigma);
        let (dp_dth, dq_dth) = phaseless_blocks(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv).unwrap();
        let ls = retrieve_ls_with_blocks(&dp_dth, &dq_dth, &x.dp_dv, &x.dq_dv, &pert).unwrap();
        let stacked = |d: &DVector<f64>| {
            let rp = &dp_dth * d - (&pert.dp - &x.dp_dv * &pert.dv);
            let rq = &dq_dth * d - (&pert.dq - &x.dq_dv * &pert.dv);
            rp.norm_squared() + rq.norm_squared()
        };
        let dp = retrieve_direct_p(&dp_dth, &pert.dp, &pert.dv, &x.dp_dv).unwrap();
        let dq = retrieve_direct_q(&dq_dth, &pert.dq, &pert.dv, &x.dq_dv).unwrap();
        let tol = 1e-9 * ls.residual.max(1e-12);
        prop_assert!(ls.residual <= stacked(&dp) + tol);
        prop_assert!(ls.residual <= stacked(&dq) + tol);
        prop_assert!((stacked(&ls.delta_theta) - ls.residual).abs() <= tol.max(1e-14));
    }

    #[test]
    fn disc_subset_is_certified_and_shrinks_input(factors in prop::collection::vec(0.6f64..1.4, 30)) {
        let mut net = case30().clone();
        for (i, f) in factors.iter().enumerate() {
            let (pd, qd) = (net.buses[i].p_demand, net.buses[i].q_demand);
            net.set_demand(i, pd * f, qd * f).unwrap();
        }
        let Ok(state) = solve_operating_point(&net) else { return Ok(()) };
        let x = pq_inputs(&net, &state);
        let all: Vec<usize> = (0..x.ids.len()).collect();
        let full = check_thm1(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv, &all).unwrap();
        let sub = max_certified_subset(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv, &all, Theorem::Discs).unwrap();
        prop_assert!(sub.bus_set.iter().all(|b| all.contains(b)));
        prop_assert_eq!(sub.bus_set.len() + sub.removed.len(), all.len());
        if full.all_ok() {
            prop_assert!(sub.removed.is_empty());
        }
        if !sub.bus_set.is_empty() {
            let again = check_thm1(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv, &sub.bus_set).unwrap();
            prop_assert!(again.all_ok());
        }
        let blocks = max_certified_subset(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv, &all, Theorem::Blocks).unwrap();
        prop_assert!((blocks.pct - 100.0 * blocks.bus_set.len() as f64 / all.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn wrapped_angles_are_half_open(t in -100.0f64..100.0) {
        let w = wrap_angle(t);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        prop_assert!(((t - w) / (2.0 * std::f64::consts::PI)).fract().abs() < 1e-9
            || (1.0 - ((t - w) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-9);
    }

    #[test]
    fn zero_steps_keep_reference(theta in prop::collection::vec(-3.0f64..3.0, 5), steps in 1usize..6) {
        let reference = DVector::from_vec(theta);
        let zeros = vec![DVector::zeros(5); steps];
        let out = integrate_angles(&zeros, &reference).unwrap();
        prop_assert_eq!(out.len(), steps + 1);
        for s in &out {
            prop_assert!((s - &out[0]).amax() == 0.0);
        }
    }
}

#[test]
fn zero_perturbation_gives_zero_angles_and_residual() {
    let net = case14();
    let state = solve_operating_point(net).unwrap();
    let x = pq_inputs(net, &state);
    let n = x.ids.len();
    let (dp_dth, dq_dth) = phaseless_blocks(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv).unwrap();
    let zero = PerturbationSample { dv: DVector::zeros(n), dp: DVector::zeros(n), dq: DVector::zeros(n) };
    let r = retrieve_ls_with_blocks(&dp_dth, &dq_dth, &x.dp_dv, &x.dq_dv, &zero).unwrap();
    assert_eq!(r.delta_theta.amax(), 0.0);
    assert_eq!(r.residual, 0.0);
}

#[test]
fn noisy_direct_solutions_differ_and_least_squares_beats_both() {
    let net = case14();
    let state = solve_operating_point(net).unwrap();
    let sim = simulate_snapshot(net, &state, &NoiseSpec::new(0.0, 0.0, 5).unwrap()).unwrap();
    let x = pq_inputs(net, &state);
    let mut pert = sim.perturbation();
    let mut r = gridphase::rng::stream(5, 9);
    pert.dp += gridphase::rng::normal_vector(&mut r, pert.len(), 0.1);
    pert.dq += gridphase::rng::normal_vector(&mut r, pert.len(), 0.1);
    let (dp_dth, dq_dth) = phaseless_blocks(&x.v, &x.p, &x.q, &x.dp_dv, &x.dq_dv).unwrap();
    let dp = retrieve_direct_p(&dp_dth, &pert.dp, &pert.dv, &x.dp_dv).unwrap();
    let dq = retrieve_direct_q(&dq_dth, &pert.dq, &pert.dv, &x.dq_dv).unwrap();
    assert!((&dp - &dq).amax() > 1e-3);
    let ls = retrieve_ls_with_blocks(&dp_dth, &dq_dth, &x.dp_dv, &x.dq_dv, &pert).unwrap();
    let stacked = |d: &DVector<f64>| {
        (&dp_dth * d - (&pert.dp - &x.dp_dv * &pert.dv)).norm_squared()
            + (&dq_dth * d - (&pert.dq - &x.dq_dv * &pert.dv)).norm_squared()
    };
    assert!(ls.residual > 0.0);
    assert!(ls.residual < stacked(&dp) && ls.residual < stacked(&dq));
}

#[test]
fn simulation_and_sweep_are_deterministic() {
    let net = case14();
    let state = solve_operating_point(net).unwrap();
    let noise = NoiseSpec::new(0.05, 0.01, 42).unwrap();
    let a = simulate_snapshot(net, &state, &noise).unwrap();
    let b = simulate_snapshot(net, &state, &noise).unwrap();
    assert_eq!(a, b);
    let cfg = SweepConfig { sigma_meas: vec![0.01, 0.05], sigma_jac: vec![0.0, 0.05], bootstraps: 4 };
    assert_eq!(noise_sweep(net, &state, &cfg, 9).unwrap(), noise_sweep(net, &state, &cfg, 9).unwrap());
    let c = simulate_snapshot(net, &state, &NoiseSpec::new(0.05, 0.01, 43).unwrap()).unwrap();
    assert_ne!(a.dg_obs, c.dg_obs);
}

#[test]
fn closed_form_matches_classical_at_random_case14_states() {
    let net = case14();
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    runner
        .run(&random_state(14), |state| {
            let [dp_dth, _, dq_dth, _] = full_classical_blocks(&net.admittance, &state);
            let cs = gridphase::jacobian::closed_form_blocks(&net.admittance, &state).unwrap();
            prop_assert!(rel_frobenius(&cs.ds_dtheta.map(|c| c.re), &dp_dth) <= 1e-12);
            prop_assert!(rel_frobenius(&cs.ds_dtheta.map(|c| c.im), &dq_dth) <= 1e-12);
            Ok(())
        })
        .unwrap();
}
