mod common;

use gridphase::jacobian::classical_blocks;
use gridphase::linalg::rel_frobenius;
use gridphase::retrieval::retrieve_ls;
use gridphase::rng;
use gridphase::sensitivity::{estimate_from_window, read_window_csv, synthesize_window, write_window_csv};
use gridphase::simkit::{simulate_snapshot, NoiseSpec};

use common::solved;

fn case14_blocks() -> gridphase::jacobian::JacobianBlocks {
    let (net, state) = solved("case14");
    classical_blocks(&net, &state, &net.pq_indices()).unwrap()
}

fn window_error(blocks: &gridphase::jacobian::JacobianBlocks, size: usize, seed: u64) -> f64 {
    let window = synthesize_window(blocks, size, 1e-3, 1e-4, seed).unwrap();
    let est = estimate_from_window(blocks.bus_ids.clone(), &window, 0.0).unwrap();
    rel_frobenius(&est.dp_dv, &blocks.dp_dv).max(rel_frobenius(&est.dq_dv, &blocks.dq_dv))
}

#[test]
fn case14_window_recovers_magnitude_blocks_within_five_percent() {
    let blocks = case14_blocks();
    let n = blocks.len();
    for seed in 0..5 {
        let e = window_error(&blocks, 4 * n, seed);
        assert!(e <= 0.05, "seed {seed}: {e}");
    }
}

#[test]
fn error_shrinks_as_window_grows() {
    let blocks = case14_blocks();
    let n = blocks.len();
    let mean = |size: usize| (0..20).map(|s| window_error(&blocks, size, rng::split(77, s))).sum::<f64>() / 20.0;
    let errors = [mean(n), mean(2 * n), mean(4 * n)];
    let inversions = errors.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "{errors:?}");
    assert!(errors[2] < errors[0], "{errors:?}");
}

#[test]
fn ridge_handles_short_windows() {
    let blocks = case14_blocks();
    let window = synthesize_window(&blocks, 2, 1e-3, 0.0, 1).unwrap();
    assert!(estimate_from_window(blocks.bus_ids.clone(), &window, 0.0).is_err());
    let est = estimate_from_window(blocks.bus_ids.clone(), &window, 1e-8).unwrap();
    assert!(est.dp_dv.iter().all(|x| x.is_finite()));
}

#[test]
fn estimated_sensitivities_support_retrieval() {
    let (net, state) = solved("case14");
    let blocks = classical_blocks(&net, &state, &net.pq_indices()).unwrap();
    let window = synthesize_window(&blocks, 200, 1e-3, 1e-6, 3).unwrap();
    let est = estimate_from_window(blocks.bus_ids.clone(), &window, 0.0).unwrap();
    let sim = simulate_snapshot(&net, &state, &NoiseSpec::new(0.0, 0.0, 3).unwrap()).unwrap();
    let hat = retrieve_ls(&sim.snapshot, &est.dp_dv, &est.dq_dv, &sim.perturbation()).unwrap().delta_theta;
    assert!((hat - sim.theta_true()).amax() < 1e-2);
}

#[test]
fn window_csv_round_trips_into_the_same_estimate() {
    let blocks = case14_blocks();
    let window = synthesize_window(&blocks, 40, 1e-3, 1e-4, 4).unwrap();
    let mut buf = Vec::new();
    write_window_csv(&mut buf, &blocks.bus_ids, &window).unwrap();
    let (ids, back) = read_window_csv(buf.as_slice()).unwrap();
    assert_eq!(ids, blocks.bus_ids);
    let a = estimate_from_window(ids, &back, 0.0).unwrap();
    let b = estimate_from_window(blocks.bus_ids.clone(), &window, 0.0).unwrap();
    assert!(rel_frobenius(&a.dp_dv, &b.dp_dv) < 1e-10);
}
