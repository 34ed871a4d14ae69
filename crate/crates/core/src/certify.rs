//! Gershgorin-based guarantees that phase angles can be recovered from
//! magnitude and injection data alone.
//!
//! The per-bus disc conditions certify invertibility of `dp/dtheta` (reactive
//! family) or `dq/dtheta` (active family). The block conditions bound four
//! spectral norms and certify the full Jacobian. Neither needs angles or
//! topology.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jacobian::phaseless_blocks;
use crate::linalg::{is_full_rank, principal_submatrix, spectral_norm, subvector};

/// Margins within this fraction of the block's infinity norm count as ties
/// and are treated as violations.
pub const TIE_TOL: f64 = 1e-10;

/// Disc-condition margins for one family (reactive or active). A positive
/// margin means the condition holds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscMargins {
    /// `|x_i| - v_i/2 (sum_{k != i} |dx_k/dv_i| - |dx_i/dv_i|)`.
    pub column: Vec<f64>,
    /// `|x_i| - 1/2 (sum_{k != i} v_k |dx_i/dv_k| - v_i |dx_i/dv_i|)`.
    pub row: Vec<f64>,
    /// Either condition holds at the bus.
    pub flags: Vec<bool>,
}

impl DiscMargins {
    pub fn all(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }

    fn best(&self, i: usize) -> f64 {
        self.column[i].max(self.row[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thm1Result {
    pub bus_set: Vec<usize>,
    /// Reactive-power conditions, certifying `dp/dtheta`.
    pub q: DiscMargins,
    /// Active-power conditions, certifying `dq/dtheta`.
    pub p: DiscMargins,
    /// Largest penetration of a `dp/dtheta` disc past the origin among
    /// violating buses. `None` when no bus violates.
    pub r_worst: Option<f64>,
}

impl Thm1Result {
    /// A bus is certified when either family holds there.
    pub fn bus_ok(&self, i: usize) -> bool {
        self.q.flags[i] || self.p.flags[i]
    }

    pub fn all_ok(&self) -> bool {
        (0..self.bus_set.len()).all(|i| self.bus_ok(i))
    }

    pub fn n_ok(&self) -> usize {
        (0..self.bus_set.len()).filter(|&i| self.bus_ok(i)).count()
    }
}

fn disc_margins(x: &DVector<f64>, v: &DVector<f64>, dx_dv: &DMatrix<f64>) -> DiscMargins {
    let n = x.len();
    let tol = TIE_TOL * dx_dv.row_iter().map(|r| r.abs().sum()).fold(1.0, f64::max);
    let mut column = Vec::with_capacity(n);
    let mut row = Vec::with_capacity(n);
    for i in 0..n {
        let d = dx_dv[(i, i)].abs();
        let col_off: f64 = (0..n).filter(|&k| k != i).map(|k| dx_dv[(k, i)].abs()).sum();
        let row_off: f64 = (0..n).filter(|&k| k != i).map(|k| v[k] * dx_dv[(i, k)].abs()).sum();
        column.push(x[i].abs() - 0.5 * v[i] * (col_off - d));
        row.push(x[i].abs() - 0.5 * (row_off - v[i] * d));
    }
    let flags = (0..n).map(|i| column[i] > tol || row[i] > tol).collect();
    DiscMargins { column, row, flags }
}

struct Restricted {
    v: DVector<f64>,
    p: DVector<f64>,
    q: DVector<f64>,
    dp_dv: DMatrix<f64>,
    dq_dv: DMatrix<f64>,
}

fn restrict(
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
    bus_set: &[usize],
) -> Result<Restricted> {
    let n = v.len();
    if p.len() != n || q.len() != n || dp_dv.shape() != (n, n) || dq_dv.shape() != (n, n) {
        return Err(Error::InvalidArgument("certify: inconsistent dimensions".into()));
    }
    if bus_set.is_empty() {
        return Err(Error::InvalidArgument("certify: empty bus set".into()));
    }
    let mut seen = vec![false; n];
    for &i in bus_set {
        if i >= n || seen[i] {
            return Err(Error::InvalidArgument(format!("certify: invalid or repeated position {i}")));
        }
        seen[i] = true;
    }
    Ok(Restricted {
        v: subvector(v, bus_set),
        p: subvector(p, bus_set),
        q: subvector(q, bus_set),
        dp_dv: principal_submatrix(dp_dv, bus_set),
        dq_dv: principal_submatrix(dq_dv, bus_set),
    })
}

/// Evaluate the per-bus disc conditions on `bus_set` (positions into the
/// given vectors and matrices).
pub fn check_thm1(
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
    bus_set: &[usize],
) -> Result<Thm1Result> {
    let r = restrict(v, p, q, dp_dv, dq_dv, bus_set)?;
    let qm = disc_margins(&r.q, &r.v, &r.dq_dv);
    let pm = disc_margins(&r.p, &r.v, &r.dp_dv);
    let (dp_dth, _) = phaseless_blocks(&r.v, &r.p, &r.q, &r.dp_dv, &r.dq_dv)?;
    let n = r.v.len();
    let violating: Vec<usize> = (0..n).filter(|&i| !(qm.flags[i] || pm.flags[i])).collect();
    let r_worst = if violating.is_empty() {
        None
    } else {
        Some(
            violating
                .iter()
                .map(|&i| {
                    let radius: f64 = (0..n).filter(|&k| k != i).map(|k| dp_dth[(i, k)].abs()).sum();
                    (radius - dp_dth[(i, i)].abs()).max(0.0)
                })
                .fold(0.0, f64::max),
        )
    };
    Ok(Thm1Result {
        bus_set: bus_set.to_vec(),
        q: qm,
        p: pm,
        r_worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Thm2Result {
    pub bus_set: Vec<usize>,
    /// `dp/dtheta` and `dq/dv` are numerically full rank.
    pub assumption1_ok: bool,
    /// `||dpdth^-1 dpdv||`, `||dqdv^-1 dqdth||`, `||dpdth^-1 dqdth||`,
    /// `||dqdv^-1 dpdv||`. Absent when the assumption fails.
    pub norms: Option<[f64; 4]>,
    pub row_pair_ok: bool,
    pub col_pair_ok: bool,
    pub sigma_max: Option<f64>,
}

impl Thm2Result {
    pub fn satisfied(&self) -> bool {
        self.row_pair_ok || self.col_pair_ok
    }
}

/// The four products whose spectral norms enter the block conditions.
fn thm2_products(r: &Restricted) -> Result<Option<[DMatrix<f64>; 4]>> {
    let (dp_dth, dq_dth) = phaseless_blocks(&r.v, &r.p, &r.q, &r.dp_dv, &r.dq_dv)?;
    if !(is_full_rank(&dp_dth) && is_full_rank(&r.dq_dv)) {
        return Ok(None);
    }
    let lu_p = dp_dth.lu();
    let lu_q = r.dq_dv.clone().lu();
    let solve = |lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, b: &DMatrix<f64>| {
        lu.solve(b).expect("full-rank block")
    };
    Ok(Some([
        solve(&lu_p, &r.dp_dv),
        solve(&lu_q, &dq_dth),
        solve(&lu_p, &dq_dth),
        solve(&lu_q, &r.dp_dv),
    ]))
}

fn pair_flags(norms: &[f64; 4]) -> (bool, bool) {
    (norms[0] < 1.0 && norms[1] < 1.0, norms[2] < 1.0 && norms[3] < 1.0)
}

/// Evaluate the block conditions on `bus_set`.
pub fn check_thm2(
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
    bus_set: &[usize],
) -> Result<Thm2Result> {
    let r = restrict(v, p, q, dp_dv, dq_dv, bus_set)?;
    let Some(products) = thm2_products(&r)? else {
        return Ok(Thm2Result {
            bus_set: bus_set.to_vec(),
            assumption1_ok: false,
            norms: None,
            row_pair_ok: false,
            col_pair_ok: false,
            sigma_max: None,
        });
    };
    let norms = products.each_ref().map(spectral_norm);
    let (row_pair_ok, col_pair_ok) = pair_flags(&norms);
    Ok(Thm2Result {
        bus_set: bus_set.to_vec(),
        assumption1_ok: true,
        norms: Some(norms),
        row_pair_ok,
        col_pair_ok,
        sigma_max: Some(norms.iter().copied().fold(0.0, f64::max)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem {
    Discs,
    Blocks,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetResult {
    /// Surviving positions, in the order of the input set.
    pub bus_set: Vec<usize>,
    pub removed: Vec<usize>,
    pub pct: f64,
}

/// Greedily remove the worst bus until the remaining set is certified.
///
/// For the disc conditions the conditions are re-evaluated on the principal
/// sub-blocks after each removal. For the block conditions the products are
/// formed once on the full set and principal submatrices of them are tested,
/// whose singular values can only shrink.
pub fn max_certified_subset(
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
    bus_set: &[usize],
    theorem: Theorem,
) -> Result<SubsetResult> {
    let total = bus_set.len();
    let mut current = bus_set.to_vec();
    let mut removed = Vec::new();
    match theorem {
        Theorem::Discs => loop {
            let res = check_thm1(v, p, q, dp_dv, dq_dv, &current)?;
            if res.all_ok() {
                break;
            }
            let worst = (0..current.len())
                .filter(|&i| !res.bus_ok(i))
                .min_by(|&a, &b| {
                    let ma = res.q.best(a).max(res.p.best(a));
                    let mb = res.q.best(b).max(res.p.best(b));
                    ma.total_cmp(&mb)
                })
                .expect("some bus violates");
            removed.push(current.remove(worst));
            if current.is_empty() {
                break;
            }
        },
        Theorem::Blocks => {
            let r = restrict(v, p, q, dp_dv, dq_dv, bus_set)?;
            match thm2_products(&r)? {
                None => {
                    removed = std::mem::take(&mut current);
                }
                Some(products) => {
                    let mut keep: Vec<usize> = (0..total).collect();
                    let score = |keep: &[usize]| {
                        let n = products.each_ref().map(|s| spectral_norm(&principal_submatrix(s, keep)));
                        n[0].max(n[1]).min(n[2].max(n[3]))
                    };
                    while !keep.is_empty() && score(&keep) >= 1.0 {
                        let best = (0..keep.len())
                            .map(|j| {
                                let mut trial = keep.clone();
                                trial.remove(j);
                                (j, if trial.is_empty() { 0.0 } else { score(&trial) })
                            })
                            .min_by(|a, b| a.1.total_cmp(&b.1))
                            .expect("non-empty")
                            .0;
                        removed.push(bus_set[keep.remove(best)]);
                    }
                    current = keep.iter().map(|&j| bus_set[j]).collect();
                }
            }
        }
    }
    Ok(SubsetResult {
        pct: 100.0 * current.len() as f64 / total as f64,
        bus_set: current,
        removed,
    })
}

/// Certificate summary for one operating point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub case: String,
    pub bus_ids: Vec<usize>,
    pub bus_flags_thm1_q: Vec<bool>,
    pub bus_flags_thm1_p: Vec<bool>,
    pub pct_thm1: f64,
    pub r_worst: Option<f64>,
    pub pct_thm2: f64,
    pub sigma_max: Option<f64>,
    pub assumption1_ok: bool,
    pub thm2_row_pair_ok: bool,
    pub thm2_col_pair_ok: bool,
}

impl CertificateReport {
    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    /// Column layout: case, #PQ, % discs, r_worst, % blocks, sigma_max.
    pub fn table_header() -> &'static str {
        "case, #PQ, %thm1, r_worst, %thm2, sigma_max"
    }
}

impl fmt::Display for CertificateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = match self.r_worst {
            Some(r) => format!("{r:.2e}"),
            None => "-".into(),
        };
        let s = match self.sigma_max {
            Some(s) => format!("{s:.3}"),
            None => "-".into(),
        };
        write!(
            f,
            "{}, {}, {}, {}, {}, {}",
            self.case,
            self.n_buses(),
            fmt_pct(self.pct_thm1),
            r,
            fmt_pct(self.pct_thm2),
            s
        )
    }
}

fn fmt_pct(x: f64) -> String {
    if (x - 100.0).abs() < 1e-12 {
        "100.0%".into()
    } else {
        format!("{x:.2}%")
    }
}

/// Run the disc and block conditions on the full set and their greedy subsets.
pub fn certify(
    case: &str,
    bus_ids: Vec<usize>,
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    dp_dv: &DMatrix<f64>,
    dq_dv: &DMatrix<f64>,
) -> Result<CertificateReport> {
    let all: Vec<usize> = (0..v.len()).collect();
    let t1 = check_thm1(v, p, q, dp_dv, dq_dv, &all)?;
    let t2 = check_thm2(v, p, q, dp_dv, dq_dv, &all)?;
    let s1 = max_certified_subset(v, p, q, dp_dv, dq_dv, &all, Theorem::Discs)?;
    let s2 = max_certified_subset(v, p, q, dp_dv, dq_dv, &all, Theorem::Blocks)?;
    Ok(CertificateReport {
        case: case.to_string(),
        bus_ids,
        bus_flags_thm1_q: t1.q.flags.clone(),
        bus_flags_thm1_p: t1.p.flags.clone(),
        pct_thm1: s1.pct,
        r_worst: t1.r_worst,
        pct_thm2: s2.pct,
        sigma_max: t2.sigma_max,
        assumption1_ok: t2.assumption1_ok,
        thm2_row_pair_ok: t2.row_pair_ok,
        thm2_col_pair_ok: t2.col_pair_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type Inputs = (DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>);

    fn diag_dominant(n: usize) -> Inputs {
        let v = DVector::from_element(n, 1.0);
        let p = DVector::from_element(n, -0.5);
        let q = DVector::from_element(n, -0.2);
        let dq_dv = DMatrix::from_fn(n, n, |i, k| if i == k { 20.0 } else { -1.0 });
        let dp_dv = DMatrix::from_fn(n, n, |i, k| if i == k { 3.0 } else { -0.3 });
        (v, p, q, dp_dv, dq_dv)
    }

    #[test]
    fn dominant_blocks_are_certified() {
        let (v, p, q, dp, dq) = diag_dominant(4);
        let all = [0, 1, 2, 3];
        let t1 = check_thm1(&v, &p, &q, &dp, &dq, &all).unwrap();
        assert!(t1.all_ok());
        assert!(t1.r_worst.is_none());
        let t2 = check_thm2(&v, &p, &q, &dp, &dq, &all).unwrap();
        assert!(t2.assumption1_ok);
        assert!(t2.satisfied());
        assert!(t2.sigma_max.unwrap() < 1.0);
    }

    #[test]
    fn margins_follow_formula() {
        let v = DVector::from_vec(vec![1.0, 0.9]);
        let q = DVector::from_vec(vec![0.1, -0.3]);
        let dq = DMatrix::from_row_slice(2, 2, &[5.0, -2.0, -3.0, 4.0]);
        let m = disc_margins(&q, &v, &dq);
        assert!((m.column[0] - (0.1 - 0.5 * 1.0 * (3.0 - 5.0))).abs() < 1e-15);
        assert!((m.row[1] - (0.3 - 0.5 * (1.0 * 3.0 - 0.9 * 4.0))).abs() < 1e-15);
    }

    #[test]
    fn weak_diagonal_violates_and_reports_penetration() {
        let v = DVector::from_element(3, 1.0);
        let p = DVector::zeros(3);
        let q = DVector::zeros(3);
        let dq = DMatrix::from_row_slice(3, 3, &[1.0, -2.0, -2.0, -2.0, 1.0, -2.0, -2.0, -2.0, 1.0]);
        let t1 = check_thm1(&v, &p, &q, &dq, &dq, &[0, 1, 2]).unwrap();
        assert!(!t1.all_ok());
        assert!((t1.r_worst.unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_block_fails_assumption() {
        let (v, p, q, dp, _) = diag_dominant(3);
        let dq = DMatrix::from_element(3, 3, 1.0);
        let t2 = check_thm2(&v, &p, &q, &dp, &dq, &[0, 1, 2]).unwrap();
        assert!(!t2.assumption1_ok);
        assert!(t2.sigma_max.is_none());
        assert!(!t2.satisfied());
    }

    #[test]
    fn subset_removes_offending_bus() {
        let (v, p, q, dp, mut dq) = diag_dominant(4);
        dq[(2, 2)] = 0.5;
        for k in 0..4 {
            if k != 2 {
                dq[(2, k)] = -4.0;
                dq[(k, 2)] = -4.0;
            }
        }
        let dp = dq.clone() * 0.1 + dp * 0.0;
        let all = [0, 1, 2, 3];
        let res = max_certified_subset(&v, &p, &q, &dp, &dq, &all, Theorem::Discs).unwrap();
        assert_eq!(res.removed, vec![2]);
        assert!((res.pct - 75.0).abs() < 1e-12);
    }

    #[test]
    fn empty_or_bad_set_is_rejected() {
        let (v, p, q, dp, dq) = diag_dominant(2);
        assert!(check_thm1(&v, &p, &q, &dp, &dq, &[]).is_err());
        assert!(check_thm1(&v, &p, &q, &dp, &dq, &[0, 0]).is_err());
        assert!(check_thm2(&v, &p, &q, &dp, &dq, &[5]).is_err());
    }

    #[test]
    fn table_row_format() {
        let report = CertificateReport {
            case: "case14".into(),
            bus_ids: (1..=9).collect(),
            bus_flags_thm1_q: vec![true; 9],
            bus_flags_thm1_p: vec![true; 9],
            pct_thm1: 100.0,
            r_worst: None,
            pct_thm2: 100.0,
            sigma_max: Some(0.8761),
            assumption1_ok: true,
            thm2_row_pair_ok: true,
            thm2_col_pair_ok: false,
        };
        assert_eq!(report.to_string(), "case14, 9, 100.0%, -, 100.0%, 0.876");
    }
}
