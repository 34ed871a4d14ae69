//! Phase-angle recovery from magnitudes, injections, and magnitude
//! sensitivities, plus current-phasor reconstruction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jacobian::phaseless_blocks;
use crate::linalg::{condition_number, lstsq, ser_vector, wrap_angle};
use crate::sensitivity::PerturbationSample;

/// Largest condition number accepted by the square solves.
pub const MAX_CONDITION: f64 = 1e10;

/// Magnitudes and net injections at one instant on an ordered bus set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasurementSnapshot {
    pub timestamp: f64,
    #[serde(serialize_with = "ser_vector")]
    pub v: DVector<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub p: DVector<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub q: DVector<f64>,
}

impl MeasurementSnapshot {
    pub fn new(timestamp: f64, v: DVector<f64>, p: DVector<f64>, q: DVector<f64>) -> Result<Self> {
        if p.len() != v.len() || q.len() != v.len() {
            return Err(Error::InvalidArgument("snapshot vectors differ in length".into()));
        }
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidArgument("snapshot magnitudes must be positive".into()));
        }
        Ok(Self { timestamp, v, p, q })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    /// Recovered angle changes, wrapped to `(-pi, pi]`.
    #[serde(serialize_with = "ser_vector")]
    pub delta_theta: DVector<f64>,
    /// Squared 2-norm of the stacked residual.
    pub residual: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

fn check_sizes(n: usize, mats: &[&DMatrix<f64>], vecs: &[&DVector<f64>]) -> Result<()> {
    if mats.iter().any(|m| m.shape() != (n, n)) || vecs.iter().any(|v| v.len() != n) {
        return Err(Error::InvalidArgument(format!("retrieval: expected {n}-bus inputs")));
    }
    Ok(())
}

/// Stacked least squares for the angle changes with magnitudes fixed:
///
/// `[dp/dtheta; dq/dtheta] dtheta = [dp - dp/dv dv; dq - dq/dv dv]`,
///
/// with both angle blocks rebuilt from the snapshot and the magnitude
/// sensitivities.
pub fn retrieve_ls(
    snapshot: &MeasurementSnapshot,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
    perturbation: &PerturbationSample,
) -> Result<RetrievalResult> {
    let n = snapshot.len();
    check_sizes(
        n,
        &[dp_dv, dq_dv],
        &[&perturbation.dv, &perturbation.dp, &perturbation.dq],
    )?;
    let (dp_dth, dq_dth) = phaseless_blocks(&snapshot.v, &snapshot.p, &snapshot.q, dp_dv, dq_dv)?;
    retrieve_ls_with_blocks(&dp_dth, &dq_dth, dp_dv, dq_dv, perturbation)
}

/// The stacked least squares with given angle blocks.
pub fn retrieve_ls_with_blocks(
    dp_dtheta: &DMatrix<f64>,
    dq_dtheta: &DMatrix<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
    perturbation: &PerturbationSample,
) -> Result<RetrievalResult> {
    let n = perturbation.len();
    check_sizes(
        n,
        &[dp_dtheta, dq_dtheta, dp_dv, dq_dv],
        &[&perturbation.dv, &perturbation.dp, &perturbation.dq],
    )?;
    let mut a = DMatrix::zeros(2 * n, n);
    a.view_mut((0, 0), (n, n)).copy_from(dp_dtheta);
    a.view_mut((n, 0), (n, n)).copy_from(dq_dtheta);
    let rp = &perturbation.dp - dp_dv * &perturbation.dv;
    let rq = &perturbation.dq - dq_dv * &perturbation.dv;
    let mut b = DVector::zeros(2 * n);
    b.rows_mut(0, n).copy_from(&rp);
    b.rows_mut(n, n).copy_from(&rq);
    let (x, rank) = lstsq(&a, &b);
    if rank < n {
        log::warn!("angle least squares is rank deficient: rank {rank} < {n}");
    }
    let residual = (&a * &x - &b).norm_squared();
    Ok(RetrievalResult {
        delta_theta: x.map(wrap_angle),
        residual,
        rank,
        rank_deficient: rank < n,
    })
}

fn direct_solve(block: &DMatrix<f64>, rhs: DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let condition = condition_number(block);
    if condition.is_nan() || condition > MAX_CONDITION {
        return Err(Error::NumericallySingular {
            context: context.into(),
            condition,
        });
    }
    let x = block.clone().lu().solve(&rhs).ok_or(Error::NumericallySingular {
        context: context.into(),
        condition,
    })?;
    Ok(x.map(wrap_angle))
}

/// `dtheta = (dp/dtheta)^-1 (dp - dp/dv dv)`.
pub fn retrieve_direct_p(
    dp_dtheta: &DMatrix<f64>,
    dp_obs: &DVector<f64>,
    dv_obs: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_sizes(dp_obs.len(), &[dp_dtheta, dp_dv], &[dv_obs])?;
    direct_solve(dp_dtheta, dp_obs - dp_dv * dv_obs, "dp/dtheta")
}

/// `dtheta = (dq/dtheta)^-1 (dq - dq/dv dv)`.
pub fn retrieve_direct_q(
    dq_dtheta: &DMatrix<f64>,
    dq_obs: &DVector<f64>,
    dv_obs: &DVector<f64>,
    dq_dv: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_sizes(dq_obs.len(), &[dq_dtheta, dq_dv], &[dv_obs])?;
    direct_solve(dq_dtheta, dq_obs - dq_dv * dv_obs, "dq/dtheta")
}

/// Net current injections `l_i = conj(s_i / V_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentPhasors {
    pub ell: DVector<Complex64>,
}

pub fn recover_currents(snapshot: &MeasurementSnapshot, theta_hat: &DVector<f64>) -> Result<CurrentPhasors> {
    let n = snapshot.len();
    if theta_hat.len() != n {
        return Err(Error::InvalidArgument("recover_currents: angle vector length mismatch".into()));
    }
    let ell = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let s = Complex64::new(snapshot.p[i], snapshot.q[i]);
            let v = Complex64::from_polar(snapshot.v[i], theta_hat[i]);
            (s / v).conj()
        }),
    );
    Ok(CurrentPhasors { ell })
}

/// Cumulative angle trajectory starting at `theta_ref`; the result has one
/// more entry than `delta_series`.
pub fn integrate_angles(delta_series: &[DVector<f64>], theta_ref: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(delta_series.len() + 1);
    let mut current = theta_ref.map(wrap_angle);
    out.push(current.clone());
    for d in delta_series {
        if d.len() != theta_ref.len() {
            return Err(Error::InvalidArgument("integrate_angles: length mismatch".into()));
        }
        current = (&current + d).map(wrap_angle);
        out.push(current.clone());
    }
    Ok(out)
}

/// Write `bus, theta_true, theta_hat, abs_error` rows. Without ground truth
/// the two truth-dependent columns are left empty.
pub fn write_retrieval_csv<W: Write>(
    writer: W,
    bus_ids: &[usize],
    theta_true: Option<&DVector<f64>>,
    theta_hat: &DVector<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bus", "theta_true", "theta_hat", "abs_error"])?;
    for (i, id) in bus_ids.iter().enumerate() {
        let (truth, err) = match theta_true {
            Some(t) => (t[i].to_string(), wrap_angle(theta_hat[i] - t[i]).abs().to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([id.to_string(), truth, theta_hat[i].to_string(), err])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (MeasurementSnapshot, DMatrix<f64>, DMatrix<f64>) {
        let snap = MeasurementSnapshot::new(
            0.0,
            DVector::from_vec(vec![1.0, 0.98]),
            DVector::from_vec(vec![-0.4, -0.3]),
            DVector::from_vec(vec![-0.1, -0.05]),
        )
        .unwrap();
        let dp_dv = DMatrix::from_row_slice(2, 2, &[2.0, -1.5, -1.4, 1.9]);
        let dq_dv = DMatrix::from_row_slice(2, 2, &[15.0, -7.0, -6.8, 14.0]);
        (snap, dp_dv, dq_dv)
    }

    #[test]
    fn ls_recovers_consistent_perturbation() {
        let (snap, dp_dv, dq_dv) = sample();
        let (a, c) = phaseless_blocks(&snap.v, &snap.p, &snap.q, &dp_dv, &dq_dv).unwrap();
        let dth = DVector::from_vec(vec![0.01, -0.02]);
        let dv = DVector::from_vec(vec![0.001, 0.002]);
        let pert = PerturbationSample {
            dv: dv.clone(),
            dp: &a * &dth + &dp_dv * &dv,
            dq: &c * &dth + &dq_dv * &dv,
        };
        let res = retrieve_ls(&snap, &dp_dv, &dq_dv, &pert).unwrap();
        assert!((res.delta_theta - &dth).amax() < 1e-12);
        assert!(res.residual < 1e-20);
        assert!(!res.rank_deficient);
        let direct = retrieve_direct_p(&a, &pert.dp, &dv, &dp_dv).unwrap();
        assert!((direct - &dth).amax() < 1e-12);
        let direct = retrieve_direct_q(&c, &pert.dq, &dv, &dq_dv).unwrap();
        assert!((direct - dth).amax() < 1e-12);
    }

    #[test]
    fn zero_sensitivities_are_rank_deficient() {
        let (snap, _, _) = sample();
        let z = DMatrix::zeros(2, 2);
        let snap = MeasurementSnapshot::new(0.0, snap.v, DVector::zeros(2), DVector::zeros(2)).unwrap();
        let pert = PerturbationSample {
            dv: DVector::zeros(2),
            dp: DVector::from_element(2, 0.1),
            dq: DVector::zeros(2),
        };
        let res = retrieve_ls(&snap, &z, &z, &pert).unwrap();
        assert!(res.rank_deficient);
        assert_eq!(res.rank, 0);
    }

    #[test]
    fn direct_rejects_singular_block() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let x = DVector::zeros(2);
        assert!(matches!(
            retrieve_direct_p(&m, &x, &x, &m),
            Err(Error::NumericallySingular { .. })
        ));
    }

    #[test]
    fn currents_match_definition() {
        let (snap, _, _) = sample();
        let theta = DVector::from_vec(vec![-0.1, -0.2]);
        let ell = recover_currents(&snap, &theta).unwrap().ell;
        for i in 0..2 {
            let v = Complex64::from_polar(snap.v[i], theta[i]);
            let s = v * ell[i].conj();
            assert!((s.re - snap.p[i]).abs() < 1e-15);
            assert!((s.im - snap.q[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn integration_accumulates_and_wraps() {
        let start = DVector::from_vec(vec![3.0]);
        let steps = vec![DVector::from_vec(vec![0.1]), DVector::from_vec(vec![0.1])];
        let traj = integrate_angles(&steps, &start).unwrap();
        assert_eq!(traj.len(), 3);
        assert!((traj[2][0] - wrap_angle(3.2)).abs() < 1e-15);
        assert!(traj[2][0] < 0.0);
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        let t = DVector::from_vec(vec![0.5]);
        let h = DVector::from_vec(vec![0.25]);
        write_retrieval_csv(&mut buf, &[4], Some(&t), &h).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bus,theta_true,theta_hat,abs_error\n4,0.5,0.25,0.25\n");
    }
}
