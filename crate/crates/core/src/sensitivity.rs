//! Power to voltage-magnitude sensitivities: regression from measurement
//! windows, and noisy copies of model-derived blocks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{write_matrix_csv, JacobianBlocks};
use crate::linalg::{ser_matrix, ser_vector, RANK_TOL};
use crate::rng;

/// Magnitude and injection changes over the PQ set at one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationSample {
    #[serde(serialize_with = "ser_vector")]
    pub dv: DVector<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub dp: DVector<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub dq: DVector<f64>,
}

impl PerturbationSample {
    pub fn len(&self) -> usize {
        self.dv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dv.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Regression,
    ModelPlusNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityEstimate {
    pub bus_ids: Vec<usize>,
    #[serde(serialize_with = "ser_matrix")]
    pub dp_dv: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub dq_dv: DMatrix<f64>,
    pub window_size: usize,
    /// Frobenius norms of the active and reactive fit residuals.
    pub residual_norm: [f64; 2],
    pub method: EstimateMethod,
}

impl SensitivityEstimate {
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [("dp_dv_est", &self.dp_dv), ("dq_dv_est", &self.dq_dv)] {
            let path = dir.join(format!("{name}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_matrix_csv(file, &self.bus_ids, m)?;
        }
        Ok(())
    }
}

fn stack(samples: &[PerturbationSample], pick: impl Fn(&PerturbationSample) -> &DVector<f64>) -> DMatrix<f64> {
    let n = samples[0].len();
    DMatrix::from_fn(samples.len(), n, |t, i| pick(&samples[t])[i])
}

/// Least-squares fit of `dp = (dp/dv) dv` and `dq = (dq/dv) dv` over the
/// window, with optional ridge penalty `ridge * ||M||_F^2`.
pub fn estimate_from_window(
    bus_ids: Vec<usize>,
    samples: &[PerturbationSample],
    ridge: f64,
) -> Result<SensitivityEstimate> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {ridge}")));
    }
    let Some(first) = samples.first() else {
        return Err(Error::RankDeficient { rank: 0, required: bus_ids.len() });
    };
    let n = first.len();
    if n != bus_ids.len() {
        return Err(Error::InvalidArgument("bus id count differs from sample dimension".into()));
    }
    if samples.iter().any(|s| s.dv.len() != n || s.dp.len() != n || s.dq.len() != n) {
        return Err(Error::InvalidArgument("window samples differ in dimension".into()));
    }
    let x = stack(samples, |s| &s.dv);
    let yp = stack(samples, |s| &s.dp);
    let yq = stack(samples, |s| &s.dq);

    let (mp_t, mq_t) = if ridge == 0.0 {
        let svd = x.clone().svd(true, true);
        let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let eps = RANK_TOL * max;
        let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
        if rank < n {
            return Err(Error::RankDeficient { rank, required: n });
        }
        (
            svd.solve(&yp, eps).expect("factors computed"),
            svd.solve(&yq, eps).expect("factors computed"),
        )
    } else {
        let xt = x.transpose();
        let gram = &xt * &x + DMatrix::identity(n, n) * ridge;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NumericallySingular { context: "ridge normal equations".into(), condition: f64::INFINITY })?;
        (chol.solve(&(&xt * &yp)), chol.solve(&(&xt * &yq)))
    };
    let residual_norm = [(&x * &mp_t - &yp).norm(), (&x * &mq_t - &yq).norm()];
    Ok(SensitivityEstimate {
        bus_ids,
        dp_dv: mp_t.transpose(),
        dq_dv: mq_t.transpose(),
        window_size: samples.len(),
        residual_norm,
        method: EstimateMethod::Regression,
    })
}

/// Model blocks plus i.i.d. `Normal(0, sigma_jac^2)` entries.
pub fn model_plus_noise(blocks: &JacobianBlocks, sigma_jac: f64, seed: u64) -> Result<SensitivityEstimate> {
    if !(sigma_jac >= 0.0 && sigma_jac.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma_jac must be non-negative, got {sigma_jac}")));
    }
    let n = blocks.len();
    let mut r = rng::stream(seed, 0);
    let xi_p = rng::normal_matrix(&mut r, n, n, sigma_jac);
    let xi_q = rng::normal_matrix(&mut r, n, n, sigma_jac);
    Ok(SensitivityEstimate {
        bus_ids: blocks.bus_ids.clone(),
        dp_dv: &blocks.dp_dv + xi_p,
        dq_dv: &blocks.dq_dv + xi_q,
        window_size: 0,
        residual_norm: [0.0, 0.0],
        method: EstimateMethod::ModelPlusNoise,
    })
}

/// Synthetic window of magnitude-only perturbations: `dv ~ N(0, scale^2)`,
/// `dp = (dp/dv) dv + e`, `dq = (dq/dv) dv + e'` with `e, e' ~ N(0, sigma^2)`.
pub fn synthesize_window(
    blocks: &JacobianBlocks,
    n_samples: usize,
    scale: f64,
    sigma_noise: f64,
    seed: u64,
) -> Result<Vec<PerturbationSample>> {
    if !(scale >= 0.0 && sigma_noise >= 0.0) {
        return Err(Error::InvalidArgument("scale and noise must be non-negative".into()));
    }
    let n = blocks.len();
    let mut r = rng::stream(seed, 1);
    Ok((0..n_samples)
        .map(|_| {
            let dv = rng::normal_vector(&mut r, n, scale);
            let dp = &blocks.dp_dv * &dv + rng::normal_vector(&mut r, n, sigma_noise);
            let dq = &blocks.dq_dv * &dv + rng::normal_vector(&mut r, n, sigma_noise);
            PerturbationSample { dv, dp, dq }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowRow {
    t: f64,
    bus: usize,
    dv: f64,
    dp: f64,
    dq: f64,
}

/// Read a window in long form (`t, bus, dv, dp, dq`). Every time step must
/// list the same buses; buses come back in ascending id order.
pub fn read_window_csv<R: Read>(reader: R) -> Result<(Vec<usize>, Vec<PerturbationSample>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut by_t: BTreeMap<u64, (f64, BTreeMap<usize, [f64; 3]>)> = BTreeMap::new();
    for row in rdr.deserialize::<WindowRow>() {
        let row = row?;
        if !row.t.is_finite() {
            return Err(Error::InvalidArgument("non-finite time stamp in window".into()));
        }
        let key = ordered_key(row.t);
        let entry = by_t.entry(key).or_insert_with(|| (row.t, BTreeMap::new()));
        if entry.1.insert(row.bus, [row.dv, row.dp, row.dq]).is_some() {
            return Err(Error::InvalidArgument(format!("bus {} repeated at t = {}", row.bus, row.t)));
        }
    }
    let Some((_, (_, first))) = by_t.iter().next() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let bus_ids: Vec<usize> = first.keys().copied().collect();
    let mut samples = Vec::with_capacity(by_t.len());
    for (t, rows) in by_t.values() {
        if rows.keys().ne(bus_ids.iter()) {
            return Err(Error::InvalidArgument(format!("time step {t} lists a different bus set")));
        }
        let get = |k: usize| DVector::from_iterator(rows.len(), rows.values().map(|r| r[k]));
        samples.push(PerturbationSample { dv: get(0), dp: get(1), dq: get(2) });
    }
    Ok((bus_ids, samples))
}

fn ordered_key(t: f64) -> u64 {
    let bits = t.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

pub fn write_window_csv<W: Write>(writer: W, bus_ids: &[usize], samples: &[PerturbationSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (t, s) in samples.iter().enumerate() {
        for (i, &bus) in bus_ids.iter().enumerate() {
            w.serialize(WindowRow { t: t as f64, bus, dv: s.dv[i], dp: s.dp[i], dq: s.dq[i] })?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
