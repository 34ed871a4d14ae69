//! Polar power-flow state, injections, and the Newton-Raphson solver.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{full_classical_blocks, phaseless_full_blocks};
use crate::linalg::{ser_vector, wrap_angle};
use crate::netmodel::{AdmittanceMatrix, BusKind, Network};

/// Bus voltage angles (radians, wrapped to `(-pi, pi]`) and magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateVector {
    #[serde(serialize_with = "ser_vector")]
    pub theta: DVector<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub v: DVector<f64>,
}

impl StateVector {
    pub fn new(theta: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if theta.len() != v.len() {
            return Err(Error::InvalidArgument(format!(
                "theta has {} entries, v has {}",
                theta.len(),
                v.len()
            )));
        }
        if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidArgument(format!("voltage magnitude at position {i} must be positive")));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("angles must be finite".into()));
        }
        Ok(Self {
            theta: DVector::from_iterator(theta.len(), theta.into_iter().map(wrap_angle)),
            v: DVector::from_vec(v),
        })
    }

    /// Magnitudes at setpoint for PV and slack buses, 1.0 elsewhere; angles
    /// zero except the slack reference angle.
    pub fn flat_start(network: &Network) -> Self {
        let theta = network
            .buses
            .iter()
            .map(|b| if b.kind == BusKind::Slack { b.theta_init } else { 0.0 })
            .collect();
        let v = network
            .buses
            .iter()
            .map(|b| if b.kind == BusKind::PQ { 1.0 } else { b.v_setpoint })
            .collect();
        Self::new(theta, v).expect("validated network")
    }

    /// The voltages stored in the case file, with generator setpoints applied.
    pub fn from_case(network: &Network) -> Self {
        let theta = network.buses.iter().map(|b| b.theta_init).collect();
        let v = network
            .buses
            .iter()
            .map(|b| if b.kind == BusKind::PQ { b.v_init } else { b.v_setpoint })
            .collect();
        Self::new(theta, v).expect("validated network")
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn complex_voltages(&self) -> DVector<Complex64> {
        DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|i| Complex64::from_polar(self.v[i], self.theta[i])),
        )
    }
}

/// Net injections `p_i = v_i sum_k v_k (G cos + B sin)` and
/// `q_i = v_i sum_k v_k (G sin - B cos)` at every bus.
pub fn injections(y: &AdmittanceMatrix, state: &StateVector) -> (DVector<f64>, DVector<f64>) {
    let n = y.dim();
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for i in 0..n {
        let (mut sp, mut sq) = (0.0, 0.0);
        for k in 0..n {
            let yik = y.get(i, k);
            if yik.re == 0.0 && yik.im == 0.0 {
                continue;
            }
            let (s, c) = (state.theta[i] - state.theta[k]).sin_cos();
            sp += state.v[k] * (yik.re * c + yik.im * s);
            sq += state.v[k] * (yik.re * s - yik.im * c);
        }
        p[i] = state.v[i] * sp;
        q[i] = state.v[i] * sq;
    }
    (p, q)
}

/// How the Newton Jacobian's angle blocks are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JacobianMode {
    #[default]
    Classical,
    Phaseless,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub mode: JacobianMode,
    /// Keep the state and angle blocks of every iteration.
    pub record_iterates: bool,
}

impl Default for NrOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 30,
            mode: JacobianMode::Classical,
            record_iterates: false,
        }
    }
}

/// State and full-bus angle blocks at which one Newton step was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mismatch_inf: f64,
    pub state: StateVector,
    pub dp_dtheta: DMatrix<f64>,
    pub dq_dtheta: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFlowSolution {
    pub state: StateVector,
    pub converged: bool,
    pub iterations: usize,
    pub final_mismatch: f64,
    /// Infinity-norm mismatch before each step, plus the final one.
    pub mismatch_trace: Vec<f64>,
    #[serde(skip)]
    pub iterates: Vec<IterationRecord>,
}

fn mismatch(network: &Network, state: &StateVector, ns: &[usize], pq: &[usize]) -> DVector<f64> {
    let (p, q) = injections(&network.admittance, state);
    let (p_sch, q_sch) = network.scheduled_injections();
    DVector::from_iterator(
        ns.len() + pq.len(),
        ns.iter()
            .map(|&i| p[i] - p_sch[i])
            .chain(pq.iter().map(|&i| q[i] - q_sch[i])),
    )
}

/// Newton-Raphson on the reduced equations: angles at PV and PQ buses,
/// magnitudes at PQ buses.
pub fn nr_solve(network: &Network, initial: &StateVector, opts: &NrOptions) -> Result<PowerFlowSolution> {
    if initial.len() != network.n_buses() {
        return Err(Error::InvalidArgument(format!(
            "initial state has {} buses, network has {}",
            initial.len(),
            network.n_buses()
        )));
    }
    if opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::InvalidArgument("tolerance must be non-negative".into()));
    }
    let ns = network.non_slack_indices();
    let pq = network.pq_indices();
    let (na, nv) = (ns.len(), pq.len());

    let mut state = initial.clone();
    let mut trace = Vec::new();
    let mut iterates = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut f = mismatch(network, &state, &ns, &pq);

    loop {
        let norm = f.amax();
        trace.push(norm);
        if norm <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter || !norm.is_finite() {
            break;
        }
        let [a, b, c, d] = match opts.mode {
            JacobianMode::Classical => full_classical_blocks(&network.admittance, &state),
            JacobianMode::Phaseless => phaseless_full_blocks(&network.admittance, &state),
        };
        let j = DMatrix::from_fn(na + nv, na + nv, |r, col| {
            let (bi, rr) = if r < na { (0, ns[r]) } else { (1, pq[r - na]) };
            let (bj, cc) = if col < na { (0, ns[col]) } else { (1, pq[col - na]) };
            match (bi, bj) {
                (0, 0) => a[(rr, cc)],
                (0, _) => b[(rr, cc)],
                (_, 0) => c[(rr, cc)],
                _ => d[(rr, cc)],
            }
        });
        if opts.record_iterates {
            iterates.push(IterationRecord {
                iteration: iterations,
                mismatch_inf: norm,
                state: state.clone(),
                dp_dtheta: a,
                dq_dtheta: c,
            });
        }
        let dx = j
            .lu()
            .solve(&f)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian {
                iteration: iterations + 1,
            })?;
        for (r, &i) in ns.iter().enumerate() {
            state.theta[i] = wrap_angle(state.theta[i] - dx[r]);
        }
        for (r, &i) in pq.iter().enumerate() {
            state.v[i] -= dx[na + r];
        }
        iterations += 1;
        if state.v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            log::warn!("Newton iterate left the positive-magnitude region at iteration {iterations}");
            trace.push(f64::INFINITY);
            break;
        }
        f = mismatch(network, &state, &ns, &pq);
    }

    Ok(PowerFlowSolution {
        final_mismatch: *trace.last().expect("at least one entry"),
        state,
        converged,
        iterations,
        mismatch_trace: trace,
        iterates,
    })
}

/// Solve from a flat start with default options, failing on non-convergence.
pub fn solve_operating_point(network: &Network) -> Result<StateVector> {
    let sol = nr_solve(network, &StateVector::flat_start(network), &NrOptions::default())?;
    if !sol.converged {
        return Err(Error::NonConvergence {
            iterations: sol.iterations,
            mismatch: sol.final_mismatch,
        });
    }
    Ok(sol.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::parse_case;

    const THREE_BUS: &str = "
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	2	0	0	0	0	1	1	0	230	1	1.1	0.9;
	3	1	90	30	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.04	100	1	250	10;
	2	40	0	300	-300	1.01	100	1	300	10;
];
mpc.branch = [
	1	2	0.01	0.085	0.176	250	250	250	0	0	1	-360	360;
	1	3	0.017	0.092	0.158	250	250	250	0	0	1	-360	360;
	2	3	0.039	0.17	0.358	150	150	150	0	0	1	-360	360;
];
";

    fn net() -> Network {
        parse_case(THREE_BUS, "three").unwrap()
    }

    #[test]
    fn converges_and_matches_schedule() {
        let n = net();
        let sol = nr_solve(&n, &StateVector::flat_start(&n), &NrOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 6);
        let (p, q) = injections(&n.admittance, &sol.state);
        assert!((p[2] + 0.9).abs() < 1e-8);
        assert!((q[2] + 0.3).abs() < 1e-8);
        assert!((p[1] - 0.4).abs() < 1e-8);
        assert_eq!(sol.state.v[0], 1.04);
        assert_eq!(sol.state.v[1], 1.01);
    }

    #[test]
    fn solved_start_needs_at_most_one_step() {
        let n = net();
        let opts = NrOptions::default();
        let sol = nr_solve(&n, &StateVector::flat_start(&n), &opts).unwrap();
        let again = nr_solve(&n, &sol.state, &opts).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 1);
    }

    #[test]
    fn modes_agree() {
        let n = net();
        let c = nr_solve(&n, &StateVector::flat_start(&n), &NrOptions::default()).unwrap();
        let p = nr_solve(
            &n,
            &StateVector::flat_start(&n),
            &NrOptions {
                mode: JacobianMode::Phaseless,
                ..NrOptions::default()
            },
        )
        .unwrap();
        assert_eq!(c.iterations, p.iterations);
        assert!((&c.state.theta - &p.state.theta).amax() < 1e-12);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let n = net();
        let opts = NrOptions {
            max_iter: 1,
            tol: 1e-14,
            ..NrOptions::default()
        };
        let sol = nr_solve(&n, &StateVector::flat_start(&n), &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
        assert!(sol.final_mismatch > 1e-14);
    }

    #[test]
    fn records_iterates_when_asked() {
        let n = net();
        let opts = NrOptions {
            record_iterates: true,
            ..NrOptions::default()
        };
        let sol = nr_solve(&n, &StateVector::flat_start(&n), &opts).unwrap();
        assert_eq!(sol.iterates.len(), sol.iterations);
        assert_eq!(sol.iterates[0].dp_dtheta.nrows(), 3);
    }

    #[test]
    fn state_rejects_non_positive_magnitude() {
        assert!(StateVector::new(vec![0.0, 0.0], vec![1.0, 0.0]).is_err());
        assert!(StateVector::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn state_wraps_angles() {
        let s = StateVector::new(vec![4.0], vec![1.0]).unwrap();
        assert!((s.theta[0] - (4.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn injections_match_complex_power() {
        let n = net();
        let s = StateVector::new(vec![0.0, -0.03, -0.08], vec![1.04, 1.01, 0.97]).unwrap();
        let (p, q) = injections(&n.admittance, &s);
        let vc = s.complex_voltages();
        let i = n.admittance.matrix() * &vc;
        for k in 0..3 {
            let sk = vc[k] * i[k].conj();
            assert!((sk.re - p[k]).abs() < 1e-12);
            assert!((sk.im - q[k]).abs() < 1e-12);
        }
    }
}
