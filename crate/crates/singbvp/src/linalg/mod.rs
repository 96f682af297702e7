//! Dense small-dimension linear algebra primitives shared by the whole crate.
//!
//! Matrices are `nalgebra` dynamic matrices over `f64`; the problem sizes are
//! tiny (n <= 16, commutator operators up to 256), so everything here favors
//! robustness over asymptotic speed.

mod expm;
mod gamma;
mod split;

pub use expm::{mat_exp, mat_power};
pub use gamma::{ln_gamma, reg_lower_gamma};
pub use split::{spectral_split, spectral_split_strict, PowerSplit, SpectralSplit};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vec64 = DVector<f64>;

/// Orthonormal basis of a linear subspace of R^n, stored column-wise.
///
/// The zero subspace is an `n x 0` matrix. Columns are orthonormal in the
/// Euclidean inner product unless stated otherwise at the construction site.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub ambient_dim: usize,
    pub columns: Mat,
}

impl SubspaceBasis {
    pub fn new(columns: Mat) -> Self {
        let ambient_dim = columns.nrows();
        Self { ambient_dim, columns }
    }

    pub fn zero(ambient_dim: usize) -> Self {
        Self { ambient_dim, columns: Mat::zeros(ambient_dim, 0) }
    }

    pub fn full(ambient_dim: usize) -> Self {
        Self { ambient_dim, columns: Mat::identity(ambient_dim, ambient_dim) }
    }

    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    /// Orthogonal projector onto the subspace (Euclidean).
    pub fn projector(&self) -> Mat {
        &self.columns * self.columns.transpose()
    }

    /// Euclidean distance between this subspace and another of the same
    /// dimension, measured as the norm of the projector difference.
    pub fn distance(&self, other: &SubspaceBasis) -> f64 {
        (self.projector() - other.projector()).norm()
    }

    /// Largest residual of the orthonormality relation B^T B = I.
    pub fn orthonormality_defect(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        (self.columns.transpose() * &self.columns - Mat::identity(self.dim(), self.dim())).norm()
    }
}

/// Symmetric positive definite metric defining an adapted inner product.
#[derive(Debug, Clone)]
pub struct Metric {
    pub w: Mat,
}

impl Metric {
    pub fn euclidean(n: usize) -> Self {
        Self { w: Mat::identity(n, n) }
    }

    pub fn new(w: Mat) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Dimension("metric must be square".into()));
        }
        let sym = (w.transpose() - &w).norm();
        if sym > 1e-10 * (1.0 + w.norm()) {
            return Err(Error::Domain(format!("metric is not symmetric (defect {sym:e})")));
        }
        let eig = w.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::Domain("metric is not positive definite".into()));
        }
        Ok(Self { w })
    }

    pub fn inner(&self, u: &Vec64, v: &Vec64) -> f64 {
        (u.transpose() * &self.w * v)[(0, 0)]
    }

    /// Adjoint of `m` with respect to this metric: W^{-1} m^T W.
    pub fn adjoint(&self, m: &Mat) -> Mat {
        let lu = self.w.clone().lu();
        let rhs = m.transpose() * &self.w;
        lu.solve(&rhs).expect("metric is invertible by construction")
    }
}

/// Orthonormalize the columns of `z` (in the metric `w` if given), dropping
/// directions whose component orthogonal to the previous ones falls below
/// `tol` times the largest column norm.
pub fn orthonormalize(z: &Mat, metric: Option<&Metric>, tol: f64) -> Mat {
    let n = z.nrows();
    let mut cols: Vec<Vec64> = Vec::new();
    let scale = z
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    for j in 0..z.ncols() {
        let mut v = z.column(j).into_owned();
        // two rounds of Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for u in &cols {
                let coeff = match metric {
                    Some(m) => m.inner(u, &v),
                    None => u.dot(&v),
                };
                v -= u * coeff;
            }
        }
        let norm = match metric {
            Some(m) => m.inner(&v, &v).sqrt(),
            None => v.norm(),
        };
        if norm > tol * scale {
            cols.push(v / norm);
        }
    }
    let mut out = Mat::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

/// Rank-revealing orthonormal range of `z` via SVD with threshold
/// `tol * sigma_max`.
pub fn range_basis(z: &Mat, tol: f64) -> SubspaceBasis {
    let n = z.nrows();
    if z.ncols() == 0 {
        return SubspaceBasis::zero(n);
    }
    let svd = z.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > tol * smax).count();
    let u = svd.u.expect("svd with u requested");
    SubspaceBasis::new(u.columns(0, rank).into_owned())
}

/// Orthonormal basis of the null space of `z` with threshold `tol * sigma_max`.
pub fn null_space(z: &Mat, tol: f64) -> Mat {
    let m = z.ncols();
    if z.nrows() == 0 || z.ncols() == 0 {
        return Mat::identity(m, m);
    }
    let svd = z.clone().svd(false, true);
    let smax = svd.singular_values.max().max(1e-300);
    let vt = svd.v_t.expect("svd with v_t requested");
    let mut cols: Vec<usize> = Vec::new();
    for i in 0..vt.nrows() {
        if i >= svd.singular_values.len() || svd.singular_values[i] <= tol * smax {
            cols.push(i);
        }
    }
    let mut out = Mat::zeros(m, cols.len());
    for (j, &i) in cols.iter().enumerate() {
        out.set_column(j, &vt.row(i).transpose());
    }
    // nalgebra's thin svd: v_t is min(m,n) x m; directions not covered by any
    // singular value live in the orthogonal complement of the v_t rows.
    if vt.nrows() < m {
        let complement = complement_of_rows(&vt);
        out = hstack(&[out, complement]);
    }
    out
}

fn complement_of_rows(vt: &Mat) -> Mat {
    let m = vt.ncols();
    let proj = Mat::identity(m, m) - vt.transpose() * vt;
    orthonormalize(&proj, None, 1e-10)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn hstack(mats: &[Mat]) -> Mat {
    let rows = mats.iter().map(|m| m.nrows()).max().unwrap_or(0);
    let cols: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for m in mats {
        out.view_mut((0, at), (m.nrows(), m.ncols())).copy_from(m);
        at += m.ncols();
    }
    out
}

/// Orthonormal basis of the intersection of two subspaces.
///
/// The intersection is read off the null space of the stacked system
/// `[B1, -B2]`; rank decisions use singular values with threshold `tol`.
pub fn subspace_intersect(s1: &SubspaceBasis, s2: &SubspaceBasis, tol: f64) -> Result<SubspaceBasis> {
    if s1.ambient_dim != s2.ambient_dim {
        return Err(Error::Dimension("subspace ambient dimensions differ".into()));
    }
    let n = s1.ambient_dim;
    if s1.dim() == 0 || s2.dim() == 0 {
        return Ok(SubspaceBasis::zero(n));
    }
    let stacked = hstack(&[s1.columns.clone(), -s2.columns.clone()]);
    let null = null_space(&stacked, tol);
    if null.ncols() == 0 {
        return Ok(SubspaceBasis::zero(n));
    }
    let coeffs = null.rows(0, s1.dim()).into_owned();
    let raw = &s1.columns * coeffs;
    Ok(SubspaceBasis::new(orthonormalize(&raw, None, tol)))
}

/// Complement of `inner` inside `outer`, orthogonal to `inner` in `metric`.
pub fn subspace_complement(
    inner: &SubspaceBasis,
    outer: &SubspaceBasis,
    metric: &Metric,
) -> Result<SubspaceBasis> {
    if inner.ambient_dim != outer.ambient_dim {
        return Err(Error::Dimension("subspace ambient dimensions differ".into()));
    }
    let n = inner.ambient_dim;
    if inner.dim() > 0 {
        let defect = (&inner.columns - outer.projector() * &inner.columns).norm();
        if defect > 1e-8 * (1.0 + inner.columns.norm()) {
            return Err(Error::Containment(format!(
                "inner subspace is not contained in the outer one (defect {defect:e})"
            )));
        }
    }
    if outer.dim() == 0 {
        return Ok(SubspaceBasis::zero(n));
    }
    if inner.dim() == 0 {
        // normalize outer in the metric
        return Ok(SubspaceBasis::new(orthonormalize(&outer.columns, Some(metric), 1e-12)));
    }
    // directions of outer that are metric-orthogonal to inner:
    // solve (B_in^T W B_out) c = 0
    let sys = inner.columns.transpose() * &metric.w * &outer.columns;
    let null = null_space(&sys, 1e-10);
    let raw = &outer.columns * null;
    Ok(SubspaceBasis::new(orthonormalize(&raw, Some(metric), 1e-12)))
}

/// Projectors of the direct-sum decomposition spanned by `parts`.
///
/// Returns `P_j` with `sum P_j = I`, `P_j P_k = 0`, `ran P_j = parts[j]`,
/// computed by inverting the concatenated basis matrix.
pub fn projectors_from_decomposition(parts: &[SubspaceBasis]) -> Result<Vec<Mat>> {
    let n = parts.first().map(|p| p.ambient_dim).unwrap_or(0);
    let total: usize = parts.iter().map(|p| p.dim()).sum();
    if total != n {
        return Err(Error::Dimension(format!(
            "parts span dimension {total}, ambient dimension is {n}"
        )));
    }
    let t = hstack(&parts.iter().map(|p| p.columns.clone()).collect::<Vec<_>>());
    let svd = t.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < 1e12) {
        return Err(Error::Decomposition { cond });
    }
    let t_inv = t
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Decomposition { cond })?;
    let mut out = Vec::with_capacity(parts.len());
    let mut at = 0;
    for p in parts {
        let d = p.dim();
        let cols = t.columns(at, d).into_owned();
        let rows = t_inv.rows(at, d).into_owned();
        out.push(cols * rows);
        at += d;
    }
    Ok(out)
}

/// Minimum-norm least-squares solution of `A x = b`, with a consistency check.
///
/// The returned solution lies in `ran A^T`. If the residual of the projected
/// right-hand side exceeds `tol` relative to `|b|`, the system is reported as
/// inconsistent (this is exactly how a failure of the range condition on the
/// constant forcing term shows up).
pub fn min_norm_solve(a: &Mat, b: &Vec64, tol: f64) -> Result<Vec64> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension("matrix rows must match vector length".into()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let x = svd
        .solve(b, tol * smax.max(1e-300))
        .map_err(|e| Error::Internal(e.to_string()))?;
    let residual = (a * &x - b).norm();
    let scale = b.norm().max(smax * x.norm()).max(1.0);
    if residual > tol * scale {
        return Err(Error::Consistency { residual });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn e(n: usize, i: usize) -> Vec64 {
        let mut v = Vec64::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn intersect_coordinate_planes() {
        let s1 = SubspaceBasis::new(hstack(&[Mat::from_column_slice(3, 1, e(3, 0).as_slice()), Mat::from_column_slice(3, 1, e(3, 1).as_slice())]));
        let s2 = SubspaceBasis::new(hstack(&[Mat::from_column_slice(3, 1, e(3, 1).as_slice()), Mat::from_column_slice(3, 1, e(3, 2).as_slice())]));
        let i = subspace_intersect(&s1, &s2, 1e-10).unwrap();
        assert_eq!(i.dim(), 1);
        assert_relative_eq!(i.columns[(1, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn intersect_idempotent_and_disjoint() {
        let s = SubspaceBasis::new(Mat::from_column_slice(2, 1, &[1.0, 0.0]));
        let i = subspace_intersect(&s, &s, 1e-10).unwrap();
        assert_eq!(i.dim(), 1);
        let s2 = SubspaceBasis::new(Mat::from_column_slice(2, 1, &[0.0, 1.0]));
        let z = subspace_intersect(&s, &s2, 1e-10).unwrap();
        assert_eq!(z.dim(), 0);
    }

    #[test]
    fn complement_examples() {
        let metric = Metric::euclidean(2);
        let inner = SubspaceBasis::new(Mat::from_column_slice(2, 1, &[1.0, 0.0]));
        let outer = SubspaceBasis::full(2);
        let c = subspace_complement(&inner, &outer, &metric).unwrap();
        assert_eq!(c.dim(), 1);
        assert_relative_eq!(c.columns[(1, 0)].abs(), 1.0, epsilon = 1e-12);

        let same = subspace_complement(&outer, &outer, &metric).unwrap();
        assert_eq!(same.dim(), 0);

        let diag = SubspaceBasis::new(Mat::from_column_slice(2, 1, &[1.0, 1.0]));
        let c2 = subspace_complement(&SubspaceBasis::zero(2), &SubspaceBasis::new(orthonormalize(&diag.columns, None, 1e-12)), &metric).unwrap();
        assert_eq!(c2.dim(), 1);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(c2.columns[(0, 0)].abs(), inv_sqrt2, epsilon = 1e-12);
        assert_relative_eq!(c2.columns[(1, 0)].abs(), inv_sqrt2, epsilon = 1e-12);
    }

    #[test]
    fn complement_rejects_non_contained() {
        let metric = Metric::euclidean(2);
        let inner = SubspaceBasis::new(Mat::from_column_slice(2, 1, &[1.0, 0.0]));
        let outer = SubspaceBasis::new(Mat::from_column_slice(2, 1, &[0.0, 1.0]));
        assert!(matches!(
            subspace_complement(&inner, &outer, &metric),
            Err(Error::Containment(_))
        ));
    }

    #[test]
    fn projectors_trivial_and_oblique() {
        let parts = vec![
            SubspaceBasis::new(Mat::from_column_slice(2, 1, &[1.0, 0.0])),
            SubspaceBasis::new(Mat::from_column_slice(2, 1, &[0.0, 1.0])),
        ];
        let ps = projectors_from_decomposition(&parts).unwrap();
        assert_relative_eq!(ps[0][(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ps[1][(1, 1)], 1.0, epsilon = 1e-12);

        let full = vec![SubspaceBasis::full(3)];
        let ps = projectors_from_decomposition(&full).unwrap();
        assert_relative_eq!((ps[0].clone() - Mat::identity(3, 3)).norm(), 0.0, epsilon = 1e-12);

        // oblique pair {e1, e1+e2}: hand-computed 2x2 inverse
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        let parts = vec![
            SubspaceBasis::new(Mat::from_column_slice(2, 1, &[1.0, 0.0])),
            SubspaceBasis::new(Mat::from_column_slice(2, 1, &[inv_sqrt2, inv_sqrt2])),
        ];
        let ps = projectors_from_decomposition(&parts).unwrap();
        let p1 = Mat::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
        let p2 = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_relative_eq!((ps[0].clone() - p1).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((ps[1].clone() - p2).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn min_norm_examples() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let b = Vec64::from_column_slice(&[0.0, -2.0]);
        let x = min_norm_solve(&a, &b, 1e-10).unwrap();
        assert_relative_eq!(x[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], -1.0, epsilon = 1e-12);

        let id = Mat::identity(3, 3);
        let b = Vec64::from_column_slice(&[1.0, 2.0, 3.0]);
        let x = min_norm_solve(&id, &b, 1e-10).unwrap();
        assert_relative_eq!((x - b).norm(), 0.0, epsilon = 1e-12);

        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let b = Vec64::from_column_slice(&[1.0, 0.0]);
        assert!(matches!(min_norm_solve(&a, &b, 1e-10), Err(Error::Consistency { .. })));
    }

    #[test]
    fn metric_adjoint_roundtrip() {
        let w = Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 2.0]);
        let metric = Metric::new(w).unwrap();
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let adj = metric.adjoint(&m);
        // <m u, v>_W = <u, adj v>_W for test vectors
        let u = Vec64::from_column_slice(&[1.0, 2.0]);
        let v = Vec64::from_column_slice(&[-3.0, 0.5]);
        let lhs = metric.inner(&(&m * &u), &v);
        let rhs = metric.inner(&u, &(&adj * &v));
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
