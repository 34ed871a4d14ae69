//! Simulated measurements, measurement nonidealities, sequential retrieval
//! over load time series, and the known-topology baseline.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{classical_blocks, closed_form_blocks, JacobianBlocks};
use crate::linalg::{ser_vector, subvector, wrap_angle};
use crate::netmodel::Network;
use crate::powerflow::{injections, nr_solve, NrOptions, StateVector};
use crate::retrieval::{integrate_angles, retrieve_ls, retrieve_ls_with_blocks, MeasurementSnapshot};
use crate::rng;
use crate::sensitivity::{model_plus_noise, PerturbationSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub sigma_meas: f64,
    #[serde(default)]
    pub sigma_jac: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma_meas: f64, sigma_jac: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            sigma_meas,
            sigma_jac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma_meas", self.sigma_meas), ("sigma_jac", self.sigma_jac)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {s}")));
            }
        }
        Ok(())
    }
}

/// One simulated observation on the PQ set.
///
/// `truth = [theta; v]` at the PQ buses, `dg_obs = J truth + xi`, and
/// `dx_obs = J^-1 dg_obs`, with `J` the PQ-reduced classical Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSimulation {
    pub bus_ids: Vec<usize>,
    pub truth: DVector<f64>,
    pub dg_obs: DVector<f64>,
    pub dx_obs: DVector<f64>,
    pub jacobian: JacobianBlocks,
    pub snapshot: MeasurementSnapshot,
}

impl SnapshotSimulation {
    pub fn n(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn theta_true(&self) -> DVector<f64> {
        self.truth.rows(0, self.n()).into_owned()
    }

    /// Observed magnitude change and injection changes.
    pub fn perturbation(&self) -> PerturbationSample {
        let n = self.n();
        PerturbationSample {
            dv: self.dx_obs.rows(n, n).into_owned(),
            dp: self.dg_obs.rows(0, n).into_owned(),
            dq: self.dg_obs.rows(n, n).into_owned(),
        }
    }
}

/// Magnitudes and injections of `state` on `indices`.
pub fn measure(network: &Network, state: &StateVector, indices: &[usize], timestamp: f64) -> Result<MeasurementSnapshot> {
    let (p, q) = injections(&network.admittance, state);
    MeasurementSnapshot::new(
        timestamp,
        subvector(&state.v, indices),
        subvector(&p, indices),
        subvector(&q, indices),
    )
}

pub fn simulate_snapshot(network: &Network, solved_state: &StateVector, noise: &NoiseSpec) -> Result<SnapshotSimulation> {
    noise.validate()?;
    let pq = network.pq_indices();
    let n = pq.len();
    let jacobian = classical_blocks(network, solved_state, &pq)?;
    let j = jacobian.assemble();
    let mut truth = DVector::zeros(2 * n);
    truth.rows_mut(0, n).copy_from(&subvector(&solved_state.theta, &pq));
    truth.rows_mut(n, n).copy_from(&subvector(&solved_state.v, &pq));
    let mut r = rng::stream(noise.seed, 0);
    let mut xi = rng::normal_vector(&mut r, n, noise.sigma_meas);
    let xi_q = rng::normal_vector(&mut r, n, noise.sigma_meas);
    xi = DVector::from_iterator(2 * n, xi.iter().chain(xi_q.iter()).copied());
    let dg_obs = &j * &truth + xi;
    let dx_obs = j
        .lu()
        .solve(&dg_obs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(Error::NumericallySingular {
            context: "PQ-reduced Jacobian".into(),
            condition: f64::INFINITY,
        })?;
    Ok(SnapshotSimulation {
        bus_ids: network.bus_ids(&pq),
        snapshot: measure(network, solved_state, &pq, 0.0)?,
        truth,
        dg_obs,
        dx_obs,
        jacobian,
    })
}

/// Model-free recovery on a simulated snapshot, with magnitude
/// sensitivities perturbed by `sigma_jac` noise drawn from `jac_seed`.
pub fn model_free_retrieval(sim: &SnapshotSimulation, sigma_jac: f64, jac_seed: u64) -> Result<DVector<f64>> {
    let est = model_plus_noise(&sim.jacobian, sigma_jac, jac_seed)?;
    Ok(retrieve_ls(&sim.snapshot, &est.dp_dv, &est.dq_dv, &sim.perturbation())?.delta_theta)
}

/// Same least squares with the angle and magnitude blocks taken from the
/// network model.
pub fn baseline_from_simulation(network: &Network, solved_state: &StateVector, sim: &SnapshotSimulation) -> Result<DVector<f64>> {
    let pq = network.pq_indices();
    let model = closed_form_blocks(&network.admittance, solved_state)?.to_blocks(&pq, network.bus_ids(&pq));
    Ok(retrieve_ls_with_blocks(
        &model.dp_dtheta,
        &model.dq_dtheta,
        &model.dp_dv,
        &model.dq_dv,
        &sim.perturbation(),
    )?
    .delta_theta)
}

pub fn baseline_known_topology(network: &Network, solved_state: &StateVector, noise: &NoiseSpec) -> Result<DVector<f64>> {
    let sim = simulate_snapshot(network, solved_state, noise)?;
    baseline_from_simulation(network, solved_state, &sim)
}

fn abs_errors(hat: &DVector<f64>, truth: &DVector<f64>) -> Vec<f64> {
    hat.iter().zip(truth.iter()).map(|(h, t)| wrap_angle(h - t).abs()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub sigma_meas: Vec<f64>,
    #[serde(default = "default_sigma_jac")]
    pub sigma_jac: Vec<f64>,
    #[serde(default = "default_bootstraps")]
    pub bootstraps: usize,
}

fn default_sigma_jac() -> Vec<f64> {
    vec![0.0]
}

fn default_bootstraps() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    /// Median of all per-bus absolute errors pooled over bootstraps.
    pub median_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub sigma_meas: f64,
    pub sigma_jac: f64,
    pub model_free: Stats,
    pub baseline: Stats,
    /// Mean absolute angle error per bootstrap: `(model_free, baseline)`.
    pub per_bootstrap: Vec<(f64, f64)>,
}

fn stats(means: &[f64], pooled: &mut [f64]) -> Stats {
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = if means.len() > 1 {
        means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Stats {
        mean,
        std: var.sqrt(),
        median_abs: median(pooled),
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Error of the model-free and baseline recoveries over a grid of noise
/// levels. Bootstrap `b` uses the same seeds at every grid point.
pub fn noise_sweep(network: &Network, solved_state: &StateVector, config: &SweepConfig, master_seed: u64) -> Result<Vec<SweepPoint>> {
    if config.bootstraps == 0 {
        return Err(Error::InvalidArgument("bootstraps must be positive".into()));
    }
    let grid: Vec<(f64, f64)> = config
        .sigma_meas
        .iter()
        .flat_map(|&m| config.sigma_jac.iter().map(move |&j| (m, j)))
        .collect();
    grid.par_iter()
        .map(|&(sigma_meas, sigma_jac)| {
            let mut mf_means = Vec::with_capacity(config.bootstraps);
            let mut bl_means = Vec::with_capacity(config.bootstraps);
            let mut mf_pool = Vec::new();
            let mut bl_pool = Vec::new();
            for b in 0..config.bootstraps as u64 {
                let noise = NoiseSpec::new(sigma_meas, sigma_jac, rng::split(master_seed, 2 * b))?;
                let sim = simulate_snapshot(network, solved_state, &noise)?;
                let truth = sim.theta_true();
                let mf = abs_errors(&model_free_retrieval(&sim, sigma_jac, rng::split(master_seed, 2 * b + 1))?, &truth);
                let bl = abs_errors(&baseline_from_simulation(network, solved_state, &sim)?, &truth);
                mf_means.push(mf.iter().sum::<f64>() / mf.len() as f64);
                bl_means.push(bl.iter().sum::<f64>() / bl.len() as f64);
                mf_pool.extend(mf);
                bl_pool.extend(bl);
            }
            Ok(SweepPoint {
                sigma_meas,
                sigma_jac,
                model_free: stats(&mf_means, &mut mf_pool),
                baseline: stats(&bl_means, &mut bl_pool),
                per_bootstrap: mf_means.into_iter().zip(bl_means).collect(),
            })
        })
        .collect()
}

/// Per-bus demand trajectories in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSeries {
    pub timestamps: Vec<f64>,
    pub bus_ids: Vec<usize>,
    pub p: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
}

impl LoadSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Multiplicative random walk on every bus with non-zero demand:
/// `f_{t+1} = f_t (1 + step_std z)`, `f_0 = 1`.
pub fn random_walk_loads(network: &Network, steps: usize, step_std: f64, dt: f64, seed: u64) -> Result<LoadSeries> {
    if step_std.is_nan() || step_std < 0.0 || steps == 0 {
        return Err(Error::InvalidArgument("random walk needs steps > 0 and step_std >= 0".into()));
    }
    let loads: Vec<usize> = (0..network.n_buses())
        .filter(|&i| network.buses[i].p_demand != 0.0 || network.buses[i].q_demand != 0.0)
        .collect();
    let p0 = DVector::from_iterator(loads.len(), loads.iter().map(|&i| network.buses[i].p_demand));
    let q0 = DVector::from_iterator(loads.len(), loads.iter().map(|&i| network.buses[i].q_demand));
    let mut r = rng::stream(seed, 4);
    let mut factor = DVector::from_element(loads.len(), 1.0);
    let mut series = LoadSeries {
        timestamps: Vec::with_capacity(steps),
        bus_ids: network.bus_ids(&loads),
        p: Vec::with_capacity(steps),
        q: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        if t > 0 {
            let z = rng::normal_vector(&mut r, loads.len(), step_std);
            factor.component_mul_assign(&z.add_scalar(1.0));
        }
        series.timestamps.push(t as f64 * dt);
        series.p.push(p0.component_mul(&factor));
        series.q.push(q0.component_mul(&factor));
    }
    Ok(series)
}

#[derive(Debug, Serialize, Deserialize)]
struct LoadRow {
    timestamp: f64,
    bus: usize,
    p: f64,
    q: f64,
}

/// Read a long-form load CSV (`timestamp, bus, p, q`, per-unit demand).
pub fn read_load_csv<R: Read>(reader: R) -> Result<LoadSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<LoadRow> = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row?);
    }
    let mut times: Vec<f64> = rows.iter().map(|r| r.timestamp).collect();
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument("non-finite timestamp in load series".into()));
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut buses: Vec<usize> = rows.iter().map(|r| r.bus).collect();
    buses.sort_unstable();
    buses.dedup();
    let col: BTreeMap<usize, usize> = buses.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut p = vec![DVector::from_element(buses.len(), f64::NAN); times.len()];
    let mut q = p.clone();
    for r in &rows {
        let t = times.binary_search_by(|x| x.total_cmp(&r.timestamp)).expect("collected above");
        p[t][col[&r.bus]] = r.p;
        q[t][col[&r.bus]] = r.q;
    }
    if p.iter().chain(q.iter()).any(|v| v.iter().any(|x| x.is_nan())) {
        return Err(Error::InvalidArgument("load series has missing (timestamp, bus) entries".into()));
    }
    Ok(LoadSeries {
        timestamps: times,
        bus_ids: buses,
        p,
        q,
    })
}

pub fn write_load_csv<W: Write>(writer: W, series: &LoadSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (t, &ts) in series.timestamps.iter().enumerate() {
        for (i, &bus) in series.bus_ids.iter().enumerate() {
            w.serialize(LoadRow {
                timestamp: ts,
                bus,
                p: series.p[t][i],
                q: series.q[t][i],
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Magnitude and injection streams on an ordered bus set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasurementSeries {
    pub bus_ids: Vec<usize>,
    pub timestamps: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<DVector<f64>>,
    #[serde(skip)]
    pub p: Vec<DVector<f64>>,
    #[serde(skip)]
    pub q: Vec<DVector<f64>>,
}

impl MeasurementSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn snapshot(&self, t: usize) -> Result<MeasurementSnapshot> {
        MeasurementSnapshot::new(self.timestamps[t], self.v[t].clone(), self.p[t].clone(), self.q[t].clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesScenario {
    #[serde(default = "one")]
    pub subsample_factor: usize,
    #[serde(default)]
    pub delay_prob: f64,
    #[serde(default = "one")]
    pub delay_steps: usize,
    #[serde(default = "zero_noise")]
    pub noise: NoiseSpec,
}

fn one() -> usize {
    1
}

fn zero_noise() -> NoiseSpec {
    NoiseSpec {
        sigma_meas: 0.0,
        sigma_jac: 0.0,
        seed: 0,
    }
}

impl Default for TimeSeriesScenario {
    fn default() -> Self {
        Self {
            subsample_factor: 1,
            delay_prob: 0.0,
            delay_steps: 1,
            noise: zero_noise(),
        }
    }
}

impl TimeSeriesScenario {
    pub fn validate(&self) -> Result<()> {
        if self.subsample_factor == 0 {
            return Err(Error::InvalidArgument("subsample_factor must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delay_prob) {
            return Err(Error::InvalidArgument(format!(
                "delay_prob must lie in [0, 1], got {}",
                self.delay_prob
            )));
        }
        self.noise.validate()
    }
}

/// Corrupted series plus the native indices kept and the delayed buses.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSeries {
    pub series: MeasurementSeries,
    pub kept: Vec<usize>,
    pub delayed_buses: Vec<usize>,
}

/// Subsample, delay a random subset of buses by a circular shift, then add
/// Gaussian noise to the injection streams.
pub fn apply_nonidealities(series: &MeasurementSeries, scenario: &TimeSeriesScenario) -> Result<CorruptedSeries> {
    scenario.validate()?;
    let kept: Vec<usize> = (0..series.len()).step_by(scenario.subsample_factor).collect();
    let pick = |s: &[DVector<f64>]| kept.iter().map(|&t| s[t].clone()).collect::<Vec<_>>();
    let mut out = MeasurementSeries {
        bus_ids: series.bus_ids.clone(),
        timestamps: kept.iter().map(|&t| series.timestamps[t]).collect(),
        v: pick(&series.v),
        p: pick(&series.p),
        q: pick(&series.q),
    };
    let n = series.bus_ids.len();
    let len = out.len();
    let mut delay_rng = rng::stream(scenario.noise.seed, 2);
    let delayed: Vec<usize> = (0..n).filter(|_| delay_rng.random_bool(scenario.delay_prob)).collect();
    if len > 0 {
        let shift = scenario.delay_steps % len;
        for &i in &delayed {
            for stream in [&mut out.v, &mut out.p, &mut out.q] {
                let original: Vec<f64> = stream.iter().map(|x| x[i]).collect();
                for t in 0..len {
                    stream[t][i] = original[(t + len - shift) % len];
                }
            }
        }
    }
    if scenario.noise.sigma_meas > 0.0 {
        let mut noise_rng = rng::stream(scenario.noise.seed, 3);
        for t in 0..len {
            out.p[t] += rng::normal_vector(&mut noise_rng, n, scenario.noise.sigma_meas);
            out.q[t] += rng::normal_vector(&mut noise_rng, n, scenario.noise.sigma_meas);
        }
    }
    Ok(CorruptedSeries {
        series: out,
        kept,
        delayed_buses: delayed.iter().map(|&i| series.bus_ids[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequentialReport {
    pub bus_ids: Vec<usize>,
    /// Timestamps of the solved native steps.
    pub timestamps: Vec<f64>,
    /// Native steps whose power flow failed and were dropped.
    pub skipped_steps: Vec<usize>,
    /// Positions (into `timestamps`) of the retained samples.
    pub retained: Vec<usize>,
    pub delayed_buses: Vec<usize>,
    #[serde(skip)]
    pub theta_true: Vec<DVector<f64>>,
    /// Estimated angles interpolated back to every native step.
    #[serde(skip)]
    pub theta_hat: Vec<DVector<f64>>,
    /// `100 ||theta_hat_i - theta_i|| / ||theta_i||` over time, per bus.
    #[serde(serialize_with = "ser_vector")]
    pub per_bus_rel_error_pct: DVector<f64>,
    /// `100 ||Theta_hat - Theta||_F / ||Theta||_F`.
    pub aggregate_rel_error_pct: f64,
    pub max_abs_error: f64,
}

impl SequentialReport {
    /// Rows of `timestamp, bus, theta_true, theta_hat, abs_error`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "bus", "theta_true", "theta_hat", "abs_error"])?;
        for (t, &ts) in self.timestamps.iter().enumerate() {
            for (i, id) in self.bus_ids.iter().enumerate() {
                let (truth, hat) = (self.theta_true[t][i], self.theta_hat[t][i]);
                w.write_record([
                    ts.to_string(),
                    id.to_string(),
                    truth.to_string(),
                    hat.to_string(),
                    wrap_angle(hat - truth).abs().to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct GroundTruth {
    timestamps: Vec<f64>,
    skipped: Vec<usize>,
    states: Vec<StateVector>,
    series: MeasurementSeries,
}

fn solve_series(network: &Network, loads: &LoadSeries) -> Result<GroundTruth> {
    let mut net = network.clone();
    let cols: Vec<usize> = loads
        .bus_ids
        .iter()
        .map(|&id| {
            net.index_of(id)
                .ok_or_else(|| Error::InvalidArgument(format!("load series names unknown bus {id}")))
        })
        .collect::<Result<_>>()?;
    let buses = network.non_slack_indices();
    let opts = NrOptions {
        tol: 1e-10,
        ..NrOptions::default()
    };
    let mut guess = StateVector::flat_start(network);
    let mut truth = GroundTruth {
        timestamps: Vec::new(),
        skipped: Vec::new(),
        states: Vec::new(),
        series: MeasurementSeries {
            bus_ids: network.bus_ids(&buses),
            timestamps: Vec::new(),
            v: Vec::new(),
            p: Vec::new(),
            q: Vec::new(),
        },
    };
    for t in 0..loads.len() {
        for (c, &i) in cols.iter().enumerate() {
            net.set_demand(i, loads.p[t][c], loads.q[t][c])?;
        }
        let sol = match nr_solve(&net, &guess, &opts) {
            Ok(sol) if sol.converged => sol,
            Ok(_) | Err(Error::SingularJacobian { .. }) => {
                log::warn!("power flow failed at step {t}, skipping");
                truth.skipped.push(t);
                continue;
            }
            Err(e) => return Err(e),
        };
        let snap = measure(&net, &sol.state, &buses, loads.timestamps[t])?;
        truth.timestamps.push(loads.timestamps[t]);
        truth.series.timestamps.push(loads.timestamps[t]);
        truth.series.v.push(snap.v);
        truth.series.p.push(snap.p);
        truth.series.q.push(snap.q);
        guess = sol.state.clone();
        truth.states.push(sol.state);
    }
    Ok(truth)
}

fn interpolate(times: &[f64], values: &[DVector<f64>], at: f64) -> DVector<f64> {
    let k = times.partition_point(|&t| t <= at);
    if k == 0 {
        return values[0].clone();
    }
    if k == times.len() {
        return values[k - 1].clone();
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let w = (at - t0) / (t1 - t0);
    let step = (&values[k] - &values[k - 1]).map(wrap_angle);
    (&values[k - 1] + step * w).map(wrap_angle)
}

/// Solve the ground truth along the load series, corrupt the measurements,
/// recover angle changes between consecutive retained samples, integrate
/// them from the true angles at the first sample, and compare with the
/// ground truth at native granularity.
///
/// Runs on every non-slack bus: generator angles move with the load, so a
/// PQ-only set would leave their contribution unmodelled.
pub fn run_sequential_retrieval(network: &Network, loads: &LoadSeries, scenario: &TimeSeriesScenario) -> Result<SequentialReport> {
    scenario.validate()?;
    let truth = solve_series(network, loads)?;
    if truth.states.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two solvable steps in the load series".into()));
    }
    let buses = network.non_slack_indices();
    let corrupted = apply_nonidealities(&truth.series, scenario)?;
    let series = &corrupted.series;
    let theta_true: Vec<DVector<f64>> = truth.states.iter().map(|s| subvector(&s.theta, &buses)).collect();

    let mut deltas = Vec::with_capacity(series.len().saturating_sub(1));
    for k in 0..series.len().saturating_sub(1) {
        let native = corrupted.kept[k];
        let blocks = classical_blocks(network, &truth.states[native], &buses)?;
        let est = model_plus_noise(&blocks, scenario.noise.sigma_jac, rng::split(scenario.noise.seed, k as u64))?;
        let pert = PerturbationSample {
            dv: &series.v[k + 1] - &series.v[k],
            dp: &series.p[k + 1] - &series.p[k],
            dq: &series.q[k + 1] - &series.q[k],
        };
        deltas.push(retrieve_ls(&series.snapshot(k)?, &est.dp_dv, &est.dq_dv, &pert)?.delta_theta);
    }
    let retained_hat = integrate_angles(&deltas, &theta_true[corrupted.kept[0]])?;
    let theta_hat: Vec<DVector<f64>> = truth
        .timestamps
        .iter()
        .map(|&t| interpolate(&series.timestamps, &retained_hat, t))
        .collect();

    let n = buses.len();
    let mut num = DVector::<f64>::zeros(n);
    let mut den = DVector::<f64>::zeros(n);
    let mut max_abs: f64 = 0.0;
    for (hat, tru) in theta_hat.iter().zip(&theta_true) {
        for i in 0..n {
            let e = wrap_angle(hat[i] - tru[i]);
            num[i] += e * e;
            den[i] += tru[i] * tru[i];
            max_abs = max_abs.max(e.abs());
        }
    }
    let per_bus = DVector::from_fn(n, |i, _| 100.0 * (num[i] / den[i].max(f64::MIN_POSITIVE)).sqrt());
    let aggregate = 100.0 * (num.sum() / den.sum().max(f64::MIN_POSITIVE)).sqrt();
    Ok(SequentialReport {
        bus_ids: network.bus_ids(&buses),
        timestamps: truth.timestamps,
        skipped_steps: truth.skipped,
        retained: corrupted.kept,
        delayed_buses: corrupted.delayed_buses,
        theta_true,
        theta_hat,
        per_bus_rel_error_pct: per_bus,
        aggregate_rel_error_pct: aggregate,
        max_abs_error: max_abs,
    })
}

/// A scenario file: case, time-series settings, and an optional noise sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub case: PathBuf,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_std")]
    pub load_step_std: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub load_series: Option<PathBuf>,
    #[serde(default, flatten)]
    pub series: TimeSeriesScenario,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_steps() -> usize {
    50
}

fn default_step_std() -> f64 {
    1e-3
}

fn default_dt() -> f64 {
    300.0
}

impl ScenarioFile {
    /// Parse JSON or TOML by extension. Relative paths inside the file are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut scenario: ScenarioFile = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Scenario(e.to_string()))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Scenario(e.to_string()))?,
            _ => return Err(Error::Scenario(format!("{} must end in .json or .toml", path.display()))),
        };
        let base = path.parent().unwrap_or(Path::new("."));
        if scenario.case.is_relative() {
            scenario.case = base.join(&scenario.case);
        }
        if let Some(ls) = scenario.load_series.as_mut() {
            if ls.is_relative() {
                *ls = base.join(&*ls);
            }
        }
        scenario.series.validate()?;
        Ok(scenario)
    }

    /// The configured load series file, or a seeded random walk.
    pub fn loads(&self, network: &Network) -> Result<LoadSeries> {
        match &self.load_series {
            Some(path) => {
                let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                read_load_csv(file)
            }
            None => random_walk_loads(
                network,
                self.steps,
                self.load_step_std,
                self.dt,
                rng::split(self.series.noise.seed, u64::MAX),
            ),
        }
    }
}

/// Write one sweep point's bootstrap errors as CSV.
pub fn write_sweep_point_csv<W: Write>(writer: W, point: &SweepPoint) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bootstrap", "sigma_meas", "sigma_jac", "model_free_mae", "baseline_mae"])?;
    for (b, (mf, bl)) in point.per_bootstrap.iter().enumerate() {
        w.write_record([
            b.to_string(),
            point.sigma_meas.to_string(),
            point.sigma_jac.to_string(),
            mf.to_string(),
            bl.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
