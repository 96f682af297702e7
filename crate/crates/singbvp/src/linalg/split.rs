//! Spectral splitting of a real matrix at a vertical line Re = c.
//!
//! The split is computed from the real Schur form: diagonal blocks are
//! classified against the line, reordered by adjacent-block swaps so the
//! selected cluster leads, and the spectral projector is recovered from a
//! quasi-triangular Sylvester solve. No eigenvector bases are formed, so
//! Jordan structure is handled without instability.

use super::{expm::mat_power, orthonormalize, range_basis, Mat, SubspaceBasis};
use crate::error::{Error, Result};

/// Three-way spectral split of a matrix at the line Re = c.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    pub threshold: f64,
    pub p_below: Mat,
    pub p_on: Mat,
    pub p_above: Mat,
    /// Largest Jordan block size among eigenvalues on the line (0 if none).
    pub r_on: usize,
}

impl SpectralSplit {
    pub fn rank_below(&self) -> usize {
        rank_of_projector(&self.p_below)
    }
    pub fn rank_on(&self) -> usize {
        rank_of_projector(&self.p_on)
    }
    pub fn rank_above(&self) -> usize {
        rank_of_projector(&self.p_above)
    }

    /// Orthonormal basis of the invariant subspace of one of the parts.
    pub fn basis_above(&self, tol: f64) -> SubspaceBasis {
        range_basis(&self.p_above, tol)
    }
    pub fn basis_below(&self, tol: f64) -> SubspaceBasis {
        range_basis(&self.p_below, tol)
    }
    pub fn basis_on(&self, tol: f64) -> SubspaceBasis {
        range_basis(&self.p_on, tol)
    }
}

fn rank_of_projector(p: &Mat) -> usize {
    p.trace().round().max(0.0) as usize
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    size: usize, // 1 or 2
    re: f64,
    im: f64, // >= 0; 0 for real blocks
}

/// Schur form with an explicit block list.
struct SchurForm {
    q: Mat,
    t: Mat,
    blocks: Vec<Block>,
}

fn schur_form(a: &Mat) -> Result<SchurForm> {
    let n = a.nrows();
    let schur = a
        .clone()
        .try_schur(1e-14, 100_000)
        .ok_or_else(|| Error::Convergence("Schur iteration did not converge".into()))?;
    let (q, mut t) = schur.unpack();
    // zero anything below the first subdiagonal; scan block structure
    for i in 0..n {
        for j in 0..i.saturating_sub(1) {
            t[(i, j)] = 0.0;
        }
    }
    let blocks = scan_blocks(&mut t)?;
    Ok(SchurForm { q, t, blocks })
}

fn scan_blocks(t: &mut Mat) -> Result<Vec<Block>> {
    let n = t.nrows();
    let scale = t.norm().max(1.0);
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let sub = if i + 1 < n { t[(i + 1, i)] } else { 0.0 };
        if sub.abs() <= 1e-13 * scale {
            if i + 1 < n {
                t[(i + 1, i)] = 0.0;
            }
            blocks.push(Block { start: i, size: 1, re: t[(i, i)], im: 0.0 });
            i += 1;
        } else {
            let (re, im) = block_eigen(t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            blocks.push(Block { start: i, size: 2, re, im });
            i += 2;
        }
    }
    Ok(blocks)
}

/// Eigenvalue data of a 2x2 Schur block; returns (Re, |Im|). For a block with
/// real eigenvalues this should not occur in canonical real Schur form, but we
/// handle it by taking the mean real part (the pair is kept together anyway).
fn block_eigen(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr / 4.0 - det;
    if disc < 0.0 {
        (tr / 2.0, (-disc).sqrt())
    } else {
        (tr / 2.0, 0.0)
    }
}

/// Swap two adjacent diagonal blocks of the quasi-triangular `t` (block `k`
/// and `k+1` in `blocks`), updating `q`, `t`, `blocks` in place.
fn swap_adjacent(q: &mut Mat, t: &mut Mat, blocks: &mut [Block], k: usize) -> Result<()> {
    let b1 = blocks[k];
    let b2 = blocks[k + 1];
    let (p, r) = (b1.size, b2.size);
    let s = b1.start;
    let m = p + r;
    let a11 = t.view((s, s), (p, p)).into_owned();
    let a12 = t.view((s, s + p), (p, r)).into_owned();
    let a22 = t.view((s + p, s + p), (r, r)).into_owned();

    // Solve A11 X - X A22 = A12 (sizes <= 2x2, use the Kronecker form).
    let x = solve_small_sylvester(&a11, &a22, &a12)?;

    // Columns [-X; I] span the invariant subspace of the trailing cluster.
    let mut z = Mat::zeros(m, r);
    z.view_mut((0, 0), (p, r)).copy_from(&(-&x));
    z.view_mut((p, 0), (r, r)).copy_from(&Mat::identity(r, r));
    let q1 = orthonormalize(&z, None, 1e-14);
    if q1.ncols() != r {
        return Err(Error::Internal("block swap lost rank".into()));
    }
    let proj = Mat::identity(m, m) - &q1 * q1.transpose();
    let q2 = orthonormalize(&proj, None, 1e-10);
    if q2.ncols() != p {
        return Err(Error::Internal("block swap complement lost rank".into()));
    }
    let g = super::hstack(&[q1, q2]);

    // Apply the window rotation to T (rows and columns) and accumulate in Q.
    let n = t.nrows();
    let t_cols = t.view((0, s), (n, m)).into_owned() * &g;
    t.view_mut((0, s), (n, m)).copy_from(&t_cols);
    let t_rows = g.transpose() * t.view((s, 0), (m, n)).into_owned();
    t.view_mut((s, 0), (m, n)).copy_from(&t_rows);
    let q_cols = q.view((0, s), (n, m)).into_owned() * &g;
    q.view_mut((0, s), (n, m)).copy_from(&q_cols);

    // Force exact block-triangular zeros in the window.
    for i in 0..p {
        for j in 0..r {
            t[(s + r + i, s + j)] = 0.0;
        }
    }

    blocks[k] = Block { start: s, size: r, re: b2.re, im: b2.im };
    blocks[k + 1] = Block { start: s + r, size: p, re: b1.re, im: b1.im };
    Ok(())
}

/// Dense Sylvester solve A X - X B = C for tiny blocks via Kronecker LU.
fn solve_small_sylvester(a: &Mat, b: &Mat, c: &Mat) -> Result<Mat> {
    let p = a.nrows();
    let r = b.ncols();
    let ident_p = Mat::identity(p, p);
    let ident_r = Mat::identity(r, r);
    // vec(AX) = (I_r (x) A) vec(X); vec(XB) = (B^T (x) I_p) vec(X)
    let k = ident_r.kronecker(a) - b.transpose().kronecker(&ident_p);
    let rhs = nalgebra::DVector::from_column_slice(c.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Internal("Sylvester system singular (clusters not separated)".into()))?;
    Ok(Mat::from_column_slice(p, r, sol.as_slice()))
}

/// Quasi-triangular Sylvester solve T11 X - X T22 = C by block back-substitution.
///
/// `t11` (k x k) and `t22` (m x m) are quasi-upper-triangular with disjoint
/// spectra; block lists describe their diagonal structure.
fn solve_qt_sylvester(
    t11: &Mat,
    blocks1: &[Block],
    t22: &Mat,
    blocks2: &[Block],
    c: &Mat,
) -> Result<Mat> {
    let k = t11.nrows();
    let m = t22.nrows();
    let mut x = Mat::zeros(k, m);
    // iterate column-blocks of X left to right, row-blocks bottom to top
    for jb in blocks2.iter() {
        let (js, jn) = (jb.start, jb.size);
        for ib in blocks1.iter().rev() {
            let (is, inn) = (ib.start, ib.size);
            // rhs = C_ij + sum_{l<j} X_il T22_lj - sum_{g>i} T11_ig X_gj
            let mut rhs = c.view((is, js), (inn, jn)).into_owned();
            if js > 0 {
                let xil = x.view((is, 0), (inn, js)).into_owned();
                let t22_lj = t22.view((0, js), (js, jn)).into_owned();
                rhs += xil * t22_lj;
            }
            if is + inn < k {
                let t11_ig = t11.view((is, is + inn), (inn, k - is - inn)).into_owned();
                let xgj = x.view((is + inn, js), (k - is - inn, jn)).into_owned();
                rhs -= t11_ig * xgj;
            }
            let a_blk = t11.view((is, is), (inn, inn)).into_owned();
            let b_blk = t22.view((js, js), (jn, jn)).into_owned();
            let xij = solve_small_sylvester(&a_blk, &b_blk, &rhs)?;
            x.view_mut((is, js), (inn, jn)).copy_from(&xij);
        }
    }
    Ok(x)
}

/// Reorder the Schur form so that selected blocks lead; returns the leading
/// cluster dimension.
fn reorder_selected(form: &mut SchurForm, selected: &[bool]) -> Result<usize> {
    // bubble selected blocks upward past unselected ones
    let mut sel: Vec<bool> = selected.to_vec();
    loop {
        let mut moved = false;
        for k in 0..form.blocks.len().saturating_sub(1) {
            if !sel[k] && sel[k + 1] {
                swap_adjacent(&mut form.q, &mut form.t, &mut form.blocks, k)?;
                sel.swap(k, k + 1);
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let dim: usize = form
        .blocks
        .iter()
        .zip(&sel)
        .take_while(|(_, &s)| s)
        .map(|(b, _)| b.size)
        .sum();
    Ok(dim)
}

/// Spectral projector onto the invariant subspace of the blocks flagged in
/// `select` (indices into `form.blocks` BEFORE reordering is applied to a
/// fresh copy of the form).
fn cluster_projector(a: &Mat, select_fn: impl Fn(&Block) -> bool) -> Result<Mat> {
    let n = a.nrows();
    let mut form = schur_form(a)?;
    let selected: Vec<bool> = form.blocks.iter().map(&select_fn).collect();
    let count: usize = form
        .blocks
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| s)
        .map(|(b, _)| b.size)
        .sum();
    if count == 0 {
        return Ok(Mat::zeros(n, n));
    }
    if count == n {
        return Ok(Mat::identity(n, n));
    }
    let k = reorder_selected(&mut form, &selected)?;
    debug_assert_eq!(k, count);
    // re-scan blocks of the reordered T for the sub-solves
    let mut t = form.t.clone();
    let blocks = scan_blocks(&mut t)?;
    let blocks1: Vec<Block> = blocks
        .iter()
        .filter(|b| b.start < k)
        .map(|b| Block { start: b.start, size: b.size, re: b.re, im: b.im })
        .collect();
    let blocks2: Vec<Block> = blocks
        .iter()
        .filter(|b| b.start >= k)
        .map(|b| Block { start: b.start - k, size: b.size, re: b.re, im: b.im })
        .collect();
    let t11 = t.view((0, 0), (k, k)).into_owned();
    let t22 = t.view((k, k), (n - k, n - k)).into_owned();
    let t12 = t.view((0, k), (k, n - k)).into_owned();
    let x = solve_qt_sylvester(&t11, &blocks1, &t22, &blocks2, &t12)?;
    // P_T = [[I, X], [0, 0]] in the reordered basis
    let mut pt = Mat::zeros(n, n);
    pt.view_mut((0, 0), (k, k)).copy_from(&Mat::identity(k, k));
    pt.view_mut((0, k), (k, n - k)).copy_from(&x);
    Ok(&form.q * pt * form.q.transpose())
}

/// Three-way spectral split at Re = c with on-line tolerance `tol`.
///
/// Eigenvalues within `tol` of the line populate the middle projector; `r_on`
/// is the largest Jordan block size among them.
pub fn spectral_split(a: &Mat, c: f64, tol: f64) -> Result<SpectralSplit> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("spectral split needs a square matrix".into()));
    }
    let n = a.nrows();
    let p_below = cluster_projector(a, |b| b.re < c - tol)?;
    let p_above = cluster_projector(a, |b| b.re > c + tol)?;
    let p_on = Mat::identity(n, n) - &p_below - &p_above;
    let r_on = if rank_of_projector(&p_on) == 0 {
        0
    } else {
        max_jordan_on_line(a, &p_on)?
    };
    Ok(SpectralSplit { threshold: c, p_below, p_on, p_above, r_on })
}

/// Split that refuses eigenvalues on the line.
pub fn spectral_split_strict(a: &Mat, c: f64, tol: f64) -> Result<SpectralSplit> {
    for lambda in a.complex_eigenvalues().iter() {
        if (lambda.re - c).abs() <= tol {
            return Err(Error::Resonance { re: lambda.re, im: lambda.im, line: c, tol });
        }
    }
    spectral_split(a, c, tol)
}

/// Largest Jordan block size among eigenvalues with Re within tol of c,
/// computed by rank deficiencies of powers on the on-line invariant subspace.
fn max_jordan_on_line(a: &Mat, p_on: &Mat) -> Result<usize> {
    let basis = range_basis(p_on, 1e-10);
    let k = basis.dim();
    if k == 0 {
        return Ok(0);
    }
    let m_on = basis.columns.transpose() * a * &basis.columns;
    // The restriction lives on the on-line invariant subspace, so every one
    // of its eigenvalues counts; group them into distinct representatives.
    let eigs = m_on.complex_eigenvalues();
    // Defective eigenvalues split by ~sqrt(machine eps) under rounding, both
    // along the axis and into spurious conjugate pairs. Cluster them and use
    // the cluster mean as the shift so that powers of the shifted matrix
    // collapse to the rounding floor.
    let scale = m_on.norm().max(1.0);
    let mut groups: Vec<(f64, f64, f64)> = Vec::new(); // (sum re, sum |im|, count)
    for l in eigs.iter() {
        let im = if l.im.abs() < 1e-6 * scale { 0.0 } else { l.im.abs() };
        match groups.iter_mut().find(|(sre, sim, cnt)| {
            (sre / cnt - l.re).abs() < 1e-6 * scale && (sim / cnt - im).abs() < 1e-6 * scale
        }) {
            Some(g) => {
                g.0 += l.re;
                g.1 += im;
                g.2 += 1.0;
            }
            None => groups.push((l.re, im, 1.0)),
        }
    }
    let reps: Vec<(f64, f64)> = groups.iter().map(|(sre, sim, c)| (sre / c, sim / c)).collect();
    let mut r_max = 0usize;
    for (re, im) in reps {
        let key = if im == 0.0 {
            &m_on - Mat::identity(k, k) * re
        } else {
            let shifted = &m_on - Mat::identity(k, k) * re;
            &shifted * &shifted + Mat::identity(k, k) * (im * im)
        };
        let key_scale = key.norm().max(1e-300);
        let mut power = Mat::identity(k, k);
        let mut prev_null = 0usize;
        for j in 1..=k {
            power = &power * &key;
            // directions that vanish in exact arithmetic sit at the rounding
            // floor of |key|^j, so the rank cut must scale with that power
            let floor = 1e-9 * key_scale.powi(j as i32);
            let nullity = k - rank_with_floor(&power, floor);
            if nullity > prev_null {
                r_max = r_max.max(j);
                prev_null = nullity;
            } else {
                break;
            }
        }
    }
    Ok(r_max.max(1))
}

fn rank_with_floor(m: &Mat, floor: f64) -> usize {
    let svd = m.clone().svd(false, false);
    svd.singular_values.iter().filter(|&&s| s > floor).count()
}

/// Clustered invariant decomposition of `a` by real part, used for stable
/// evaluation of x^A products: within each part the real-part spread is small,
/// so exp(ln x * M_part) stays well conditioned down to tiny x.
#[derive(Debug, Clone)]
pub struct PowerSplit {
    /// Orthonormal basis per part (columns).
    pub bases: Vec<Mat>,
    /// Restricted operator per part, M_g = D_g A B_g.
    pub restricted: Vec<Mat>,
    /// Dual rows per part (rows of the inverse of the concatenated basis).
    pub duals: Vec<Mat>,
    /// Mean real part per part (for envelope estimates).
    pub re_centers: Vec<f64>,
    /// Min and max real part per part.
    pub re_ranges: Vec<(f64, f64)>,
}

impl PowerSplit {
    /// Cluster the spectrum of `a` into groups with real-part diameter at
    /// most `max_diam` and build the invariant decomposition.
    pub fn new(a: &Mat, max_diam: f64) -> Result<Self> {
        let n = a.nrows();
        let form = schur_form(a)?;
        let mut res: Vec<f64> = form.blocks.iter().map(|b| b.re).collect();
        res.sort_by(|x, y| x.partial_cmp(y).unwrap());
        res.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
        // greedy clustering of sorted real parts
        let mut clusters: Vec<(f64, f64)> = Vec::new();
        for &re in &res {
            match clusters.last_mut() {
                Some((lo, hi)) if re - *lo <= max_diam => *hi = re,
                _ => clusters.push((re, re)),
            }
        }
        let mut bases = Vec::new();
        let mut restricted = Vec::new();
        let mut re_centers = Vec::new();
        let mut re_ranges = Vec::new();
        for &(lo, hi) in &clusters {
            let p = cluster_projector(a, |b| b.re >= lo - 1e-9 && b.re <= hi + 1e-9)?;
            let basis = range_basis(&p, 1e-10);
            let m = basis.columns.transpose() * a * &basis.columns;
            re_centers.push((lo + hi) / 2.0);
            re_ranges.push((lo, hi));
            restricted.push(m);
            bases.push(basis.columns);
        }
        let t = super::hstack(&bases);
        if t.ncols() != n {
            return Err(Error::Internal(format!(
                "power split parts span {} of {} dimensions",
                t.ncols(),
                n
            )));
        }
        let t_inv = t
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Internal("power split basis is singular".into()))?;
        let mut duals = Vec::new();
        let mut at = 0;
        for b in &bases {
            duals.push(t_inv.rows(at, b.ncols()).into_owned());
            at += b.ncols();
        }
        Ok(Self { bases, restricted, duals, re_centers, re_ranges })
    }

    pub fn part_count(&self) -> usize {
        self.bases.len()
    }

    /// x^A assembled from the parts (for moderate x; prefer the factored
    /// part-wise products for extreme arguments).
    pub fn power(&self, x: f64) -> Result<Mat> {
        let n = self.bases.first().map(|b| b.nrows()).unwrap_or(0);
        let mut out = Mat::zeros(n, n);
        for g in 0..self.part_count() {
            out += &self.bases[g] * mat_power(&self.restricted[g], x)? * &self.duals[g];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn split_diagonal_strict() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let s = spectral_split_strict(&a, 1.0, 1e-8).unwrap();
        assert_relative_eq!((s.p_below.clone() - Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])).norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!(s.p_on.norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!((s.p_above.clone() - Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm(), 0.0, epsilon = 1e-10);
        assert_eq!(s.r_on, 0);
    }

    #[test]
    fn split_strict_rejects_on_line() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            spectral_split_strict(&a, 1.0, 1e-8),
            Err(Error::Resonance { .. })
        ));
    }

    #[test]
    fn split_commutator_ranks() {
        // commutator operator of diag(2,-1): eigenvalues {0, 0, 3, -3}
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let ident = Mat::identity(2, 2);
        let op = a.transpose().kronecker(&ident) - ident.kronecker(&a);
        let s = spectral_split(&op, -1.0, 1e-8).unwrap();
        assert_eq!(s.rank_below(), 1);
        assert_eq!(s.rank_on(), 0);
        assert_eq!(s.rank_above(), 3);
        assert_eq!(s.r_on, 0);
    }

    #[test]
    fn split_projector_algebra_coupled() {
        // non-normal matrix with eigenvalues -2, 0.5, 3
        let a = Mat::from_row_slice(
            3,
            3,
            &[-2.0, 5.0, 1.0, 0.0, 0.5, -2.0, 0.0, 0.0, 3.0],
        );
        let q = Mat::from_row_slice(
            3,
            3,
            &[0.6, -0.8, 0.0, 0.48, 0.36, -0.8, 0.64, 0.48, 0.6],
        );
        let a = &q * a * q.transpose(); // similarity by orthogonal q keeps spectrum
        let s = spectral_split(&a, 0.0, 1e-8).unwrap();
        let n = 3;
        let sum = &s.p_below + &s.p_on + &s.p_above;
        assert_relative_eq!((sum - Mat::identity(n, n)).norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!((&s.p_below * &s.p_above).norm(), 0.0, epsilon = 1e-10);
        assert_relative_eq!((&a * &s.p_below - &s.p_below * &a).norm(), 0.0, epsilon = 1e-8);
        assert_relative_eq!((&s.p_below * &s.p_below - &s.p_below).norm(), 0.0, epsilon = 1e-9);
        assert_eq!(s.rank_below(), 1);
        assert_eq!(s.rank_above(), 2);
    }

    #[test]
    fn split_complex_pair() {
        // eigenvalues -1 +/- 2i and 1.5
        let a = Mat::from_row_slice(
            3,
            3,
            &[-1.0, 2.0, 0.3, -2.0, -1.0, 0.7, 0.0, 0.0, 1.5],
        );
        let s = spectral_split(&a, 0.0, 1e-8).unwrap();
        assert_eq!(s.rank_below(), 2);
        assert_eq!(s.rank_above(), 1);
        assert_relative_eq!((&a * &s.p_above - &s.p_above * &a).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn on_line_jordan_sizes() {
        // -I is on the line Re = -1, diagonalizable: r = 1
        let a = Mat::identity(2, 2) * -1.0;
        let s = spectral_split(&a, -1.0, 1e-8).unwrap();
        assert_eq!(s.rank_on(), 2);
        assert_eq!(s.r_on, 1);

        // Jordan block at -1: r = 2
        let j = Mat::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        let s = spectral_split(&j, -1.0, 1e-8).unwrap();
        assert_eq!(s.r_on, 2);

        // mixed: Jordan pair at -1 plus eigenvalue 4
        let m = Mat::from_row_slice(
            3,
            3,
            &[-1.0, 1.0, 0.5, 0.0, -1.0, 2.0, 0.0, 0.0, 4.0],
        );
        let s = spectral_split(&m, -1.0, 1e-8).unwrap();
        assert_eq!(s.rank_on(), 2);
        assert_eq!(s.r_on, 2);
        assert_eq!(s.rank_above(), 1);
    }

    #[test]
    fn power_split_clusters() {
        let a = Mat::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, -1.0, 0.5, 0.0, 0.0, -1.2]);
        let ps = PowerSplit::new(&a, 0.5).unwrap();
        assert_eq!(ps.part_count(), 2); // {-1.2, -1.0} and {2.0}
        for x in [1e-6, 0.03, 0.7, 1.0] {
            let direct = mat_power(&a, x).unwrap();
            let via = ps.power(x).unwrap();
            assert_relative_eq!((direct.clone() - via).norm() / direct.norm(), 0.0, epsilon = 1e-9);
        }
    }
}
