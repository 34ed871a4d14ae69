//! Power-flow Jacobian blocks in three forms: the classical admittance
//! summations, the phaseless construction that rebuilds the angle blocks from
//! magnitude sensitivities and injections, and closed-form complex matrices.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{block2x2, principal_submatrix, ser_matrix};
use crate::netmodel::{AdmittanceMatrix, Network};
use crate::powerflow::StateVector;

/// The four real sub-blocks of the polar Jacobian on an ordered bus set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianBlocks {
    /// Bus ids labelling rows and columns.
    pub bus_ids: Vec<usize>,
    #[serde(serialize_with = "ser_matrix")]
    pub dp_dtheta: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub dp_dv: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub dq_dtheta: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub dq_dv: DMatrix<f64>,
}

impl JacobianBlocks {
    pub fn len(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bus_ids.is_empty()
    }

    /// Principal sub-blocks at the given positions of this block's bus set.
    pub fn restrict(&self, positions: &[usize]) -> JacobianBlocks {
        JacobianBlocks {
            bus_ids: positions.iter().map(|&i| self.bus_ids[i]).collect(),
            dp_dtheta: principal_submatrix(&self.dp_dtheta, positions),
            dp_dv: principal_submatrix(&self.dp_dv, positions),
            dq_dtheta: principal_submatrix(&self.dq_dtheta, positions),
            dq_dv: principal_submatrix(&self.dq_dv, positions),
        }
    }

    /// `[[dp/dtheta, dp/dv], [dq/dtheta, dq/dv]]`.
    pub fn assemble(&self) -> DMatrix<f64> {
        block2x2(&self.dp_dtheta, &self.dp_dv, &self.dq_dtheta, &self.dq_dv)
    }

    /// Write one CSV per block into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [
            ("dp_dtheta", &self.dp_dtheta),
            ("dp_dv", &self.dp_dv),
            ("dq_dtheta", &self.dq_dtheta),
            ("dq_dv", &self.dq_dv),
        ] {
            let path = dir.join(format!("{name}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_matrix_csv(file, &self.bus_ids, m)?;
        }
        Ok(())
    }
}

/// Write a square matrix as CSV: a header of bus ids, then one row per bus.
pub fn write_matrix_csv<W: Write>(writer: W, bus_ids: &[usize], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["bus".to_string()];
    header.extend(bus_ids.iter().map(|id| id.to_string()));
    w.write_record(&header)?;
    for (r, id) in bus_ids.iter().enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(m.row(r).iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Full-bus classical blocks from the admittance summations.
///
/// Diagonal entries are accumulated over all other buses.
pub fn full_classical_blocks(y: &AdmittanceMatrix, state: &StateVector) -> [DMatrix<f64>; 4] {
    let n = y.dim();
    let (theta, v) = (&state.theta, &state.v);
    let mut dp_dth = DMatrix::zeros(n, n);
    let mut dp_dv = DMatrix::zeros(n, n);
    let mut dq_dth = DMatrix::zeros(n, n);
    let mut dq_dv = DMatrix::zeros(n, n);
    for i in 0..n {
        let (mut s_pth, mut s_pv, mut s_qth, mut s_qv) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..n {
            if k == i {
                continue;
            }
            let yik = y.get(i, k);
            let (g, b) = (yik.re, yik.im);
            let (s, c) = (theta[i] - theta[k]).sin_cos();
            let gc_bs = g * c + b * s;
            let gs_bc = g * s - b * c;
            dp_dth[(i, k)] = v[i] * v[k] * gs_bc;
            dp_dv[(i, k)] = v[i] * gc_bs;
            dq_dth[(i, k)] = -v[i] * v[k] * gc_bs;
            dq_dv[(i, k)] = v[i] * gs_bc;
            s_pth += v[k] * gs_bc;
            s_pv += v[k] * gc_bs;
            s_qth += v[k] * gc_bs;
            s_qv += v[k] * gs_bc;
        }
        let yii = y.get(i, i);
        dp_dth[(i, i)] = -v[i] * s_pth;
        dp_dv[(i, i)] = 2.0 * v[i] * yii.re + s_pv;
        dq_dth[(i, i)] = v[i] * s_qth;
        dq_dv[(i, i)] = -2.0 * v[i] * yii.im + s_qv;
    }
    [dp_dth, dp_dv, dq_dth, dq_dv]
}

/// Classical blocks restricted to `index_set` (internal bus positions).
pub fn classical_blocks(network: &Network, state: &StateVector, index_set: &[usize]) -> Result<JacobianBlocks> {
    check_state(network.n_buses(), state)?;
    check_index_set(network.n_buses(), index_set)?;
    let [a, b, c, d] = full_classical_blocks(&network.admittance, state);
    Ok(JacobianBlocks {
        bus_ids: network.bus_ids(index_set),
        dp_dtheta: principal_submatrix(&a, index_set),
        dp_dv: principal_submatrix(&b, index_set),
        dq_dtheta: principal_submatrix(&c, index_set),
        dq_dv: principal_submatrix(&d, index_set),
    })
}

/// Diagonal entries of the four blocks from the injections and the bus
/// self-admittance, returned as `[dp/dtheta, dp/dv, dq/dtheta, dq/dv]`.
pub fn diagonal_from_injections(p: f64, q: f64, v: f64, y_ii: Complex64) -> [f64; 4] {
    let (g, b) = (y_ii.re, y_ii.im);
    [-q - b * v * v, p / v + g * v, p - g * v * v, q / v - b * v]
}

/// Angle blocks rebuilt from magnitude sensitivities:
///
/// `dp/dtheta = dq/dv * diag(v) - 2 diag(q)`,
/// `dq/dtheta = -dp/dv * diag(v) + 2 diag(p)`.
///
/// All inputs refer to the same ordered bus set.
pub fn phaseless_blocks(
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = v.len();
    if p.len() != n || q.len() != n || dp_dv.shape() != (n, n) || dq_dv.shape() != (n, n) {
        return Err(Error::InvalidArgument(format!(
            "phaseless_blocks: inconsistent dimensions (v {n}, p {}, q {}, dp_dv {:?}, dq_dv {:?})",
            p.len(),
            q.len(),
            dp_dv.shape(),
            dq_dv.shape()
        )));
    }
    let mut dp_dth = dq_dv.clone();
    let mut dq_dth = -dp_dv;
    for k in 0..n {
        dp_dth.column_mut(k).scale_mut(v[k]);
        dq_dth.column_mut(k).scale_mut(v[k]);
        dp_dth[(k, k)] -= 2.0 * q[k];
        dq_dth[(k, k)] += 2.0 * p[k];
    }
    Ok((dp_dth, dq_dth))
}

/// Phaseless blocks: magnitude blocks from the classical form, angle blocks
/// rebuilt from them and the computed injections.
pub fn phaseless_full_blocks(y: &AdmittanceMatrix, state: &StateVector) -> [DMatrix<f64>; 4] {
    let [_, dp_dv, _, dq_dv] = full_classical_blocks(y, state);
    let (p, q) = crate::powerflow::injections(y, state);
    let (dp_dth, dq_dth) = phaseless_blocks(&state.v, &p, &q, &dp_dv, &dq_dv).expect("consistent dimensions");
    [dp_dth, dp_dv, dq_dth, dq_dv]
}

/// Complex power sensitivities `dS/dv` and `dS/dtheta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSensitivities {
    pub ds_dv: DMatrix<Complex64>,
    pub ds_dtheta: DMatrix<Complex64>,
}

impl ComplexSensitivities {
    /// Real blocks on `positions`, labelled with `bus_ids`.
    pub fn to_blocks(&self, positions: &[usize], bus_ids: Vec<usize>) -> JacobianBlocks {
        let re = |m: &DMatrix<Complex64>| principal_submatrix(&m.map(|c| c.re), positions);
        let im = |m: &DMatrix<Complex64>| principal_submatrix(&m.map(|c| c.im), positions);
        JacobianBlocks {
            bus_ids,
            dp_dtheta: re(&self.ds_dtheta),
            dp_dv: re(&self.ds_dv),
            dq_dtheta: im(&self.ds_dtheta),
            dq_dv: im(&self.ds_dv),
        }
    }
}

/// Closed-form sensitivities for any square complex admittance matrix,
/// including compound multi-phase matrices.
pub fn closed_form_sensitivities(
    y: &DMatrix<Complex64>,
    theta: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<ComplexSensitivities> {
    let n = y.nrows();
    if !y.is_square() || theta.len() != n || v.len() != n {
        return Err(Error::InvalidArgument("closed_form: inconsistent dimensions".into()));
    }
    if let Some(i) = v.iter().position(|&x| x == 0.0 || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("closed_form: zero or invalid magnitude at node {i}")));
    }
    let vc = DVector::from_iterator(n, (0..n).map(|i| Complex64::from_polar(v[i], theta[i])));
    let current = y * &vc;
    let j = Complex64::new(0.0, 1.0);
    let mut ds_dv = DMatrix::zeros(n, n);
    let mut ds_dth = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let cross = y[(i, k)].conj() * vc[k].conj();
            let diag = if i == k { current[i].conj() } else { Complex64::new(0.0, 0.0) };
            ds_dv[(i, k)] = vc[i] * (diag + cross) / v[k];
            ds_dth[(i, k)] = j * vc[i] * (diag - cross);
        }
    }
    Ok(ComplexSensitivities {
        ds_dv,
        ds_dtheta: ds_dth,
    })
}

pub fn closed_form_blocks(y: &AdmittanceMatrix, state: &StateVector) -> Result<ComplexSensitivities> {
    closed_form_sensitivities(y.matrix(), &state.theta, &state.v)
}

fn check_state(n: usize, state: &StateVector) -> Result<()> {
    if state.len() != n {
        return Err(Error::InvalidArgument(format!(
            "state has {} buses, network has {n}",
            state.len()
        )));
    }
    Ok(())
}

fn check_index_set(n: usize, index_set: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in index_set {
        if i >= n || seen[i] {
            return Err(Error::InvalidArgument(format!("invalid or repeated bus position {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}
