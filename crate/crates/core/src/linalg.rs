//! Small dense linear-algebra helpers shared by the numerical modules.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::ser::{SerializeSeq, Serializer};

/// Relative singular-value cutoff used for rank and pseudoinverse decisions.
pub const RANK_TOL: f64 = 1e-10;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

pub fn principal_submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    m.clone().svd(false, false).singular_values
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// 2-norm condition number, infinite when the matrix is singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    let max = s.iter().copied().fold(0.0, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank with cutoff `RANK_TOL * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let s = singular_values(m);
    let max = s.iter().copied().fold(0.0, f64::max);
    s.iter().filter(|&&x| x > RANK_TOL * max).count()
}

pub fn is_full_rank(m: &DMatrix<f64>) -> bool {
    m.is_square() && numerical_rank(m) == m.nrows() && m.nrows() > 0
}

/// Minimum-norm least-squares solution via SVD with cutoff `RANK_TOL * sigma_max`.
/// Returns the solution and the numerical rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = RANK_TOL * max;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let x = svd.solve(b, eps).expect("both factors were computed");
    (x, rank)
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

pub fn rel_norm(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// Stack `[[a, b], [c, d]]` into one matrix.
pub fn block2x2(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), a.ncols());
    let mut out = DMatrix::zeros(n + c.nrows(), m + b.ncols());
    out.view_mut((0, 0), (n, m)).copy_from(a);
    out.view_mut((0, m), (n, b.ncols())).copy_from(b);
    out.view_mut((n, 0), (c.nrows(), m)).copy_from(c);
    out.view_mut((n, m), (d.nrows(), d.ncols())).copy_from(d);
    out
}

/// Serialize a vector as a JSON array.
pub fn ser_vector<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Serialize a matrix as an array of rows.
pub fn ser_matrix<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let mut rows = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        rows.serialize_element(&row)?;
    }
    rows.end()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn lstsq_reports_rank() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (x, rank) = lstsq(&a, &b);
        assert_eq!(rank, 1);
        assert!((&a * &x - &b).norm() < 1e-12);
    }

    #[test]
    fn block_assembly() {
        let i = DMatrix::<f64>::identity(2, 2);
        let z = DMatrix::<f64>::zeros(2, 2);
        let m = block2x2(&i, &z, &z, &(&i * 2.0));
        assert_eq!(m[(3, 3)], 2.0);
        assert_eq!(m[(0, 2)], 0.0);
    }
}
