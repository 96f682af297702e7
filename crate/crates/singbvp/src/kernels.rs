//! Anchored evaluation engine for projected evolution kernels
//! Y(x; x0) P_S Y^{-1}(s; x0) across both regions, plus the cumulative
//! quadratures the solution representation is assembled from.
//!
//! On (0, x0] the fundamental factorization (E + U(x)) x^A is expanded over
//! real-part clusters of the residue spectrum, so every x^A product is
//! evaluated through well-conditioned small exponentials; coefficients that
//! vanish structurally (pairings of fast spectral parts with slow lattice
//! parts) are zeroed outright, which keeps rows of slow kernels from
//! inheriting x^{-lambda} blowups.
//!
//! On [x0, X_inf] the six lattice parts are swept alongside the dichotomy
//! checkpoints, grouped by their behavior at infinity; decaying column
//! families and their dual rows are re-projected at every checkpoint onto the
//! stably-determined invariant families, which pins the exponential dynamic
//! range to the kernel's own scale.

use crate::dichotomy::{self, DichotomyData};
use crate::error::{Error, Result};
use crate::grammar::TermSum;
use crate::lattice::{self, SubspaceLattice};
use crate::linalg::{mat_exp, Mat, PowerSplit, Vec64};
use crate::nearzero::{self, Anchor, FundamentalNearZero, KernelCorrection};
use crate::problem::{self, ProblemSpec, SolverConfig};
use crate::quad;
use std::collections::BTreeMap;

/// Width of the logarithmic quadrature panels on the near side. The panel
/// boundaries double as output-grid points, so the width also controls the
/// finite-difference quality of the residual diagnostics.
pub const TAU_PANEL: f64 = 0.05;

/// Subset of lattice parts (1-based indices), encoded as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PartSet(pub u8);

impl PartSet {
    pub fn of(parts: &[usize]) -> Self {
        let mut m = 0u8;
        for &p in parts {
            assert!((1..=6).contains(&p));
            m |= 1 << (p - 1);
        }
        PartSet(m)
    }
    pub fn contains(&self, part: usize) -> bool {
        self.0 & (1 << (part - 1)) != 0
    }
    pub fn parts(&self) -> Vec<usize> {
        (1..=6).filter(|&p| self.contains(p)).collect()
    }
    /// parts 1..3 decay at infinity
    pub fn in_decay_group(&self) -> bool {
        self.0 & 0b111000 == 0
    }
    /// parts 4..6 grow at infinity
    pub fn in_growth_group(&self) -> bool {
        self.0 & 0b000111 == 0
    }
    /// avoids the fast-at-zero parts 1 and 4
    pub fn avoids_fast(&self) -> bool {
        self.0 & 0b001001 == 0
    }
    /// only the fast-at-zero parts
    pub fn only_fast(&self) -> bool {
        self.0 & !0b001001 == 0
    }
}

/// Near-side expansion data of one part subset.
struct SubsetData {
    dim: usize,
    /// column coefficients per spectral cluster: x-side, k_g x dim
    ca: Vec<Mat>,
    /// row coefficients per spectral cluster: s-side, dim x k_h
    cb: Vec<Mat>,
}

/// Checkpoint sweep of one far-side family group.
struct FamilySweep {
    /// orthonormal frames per checkpoint (columns n x d, or rows d x n)
    frames: Vec<Mat>,
    /// accumulated factors per checkpoint (d x d)
    cums: Vec<Mat>,
}

/// The full solver pipeline for one problem.
pub struct Pipeline {
    pub spec: ProblemSpec,
    pub cfg: SolverConfig,
    pub alpha: f64,
    pub anchor: Anchor,
    pub fundamental: FundamentalNearZero,
    pub correction: KernelCorrection,
    pub dichotomy: DichotomyData,
    pub lattice: SubspaceLattice,
    pub x0: f64,
    pub x_inf: f64,
    power: PowerSplit,
    subsets: BTreeMap<PartSet, SubsetData>,
    col_minus: FamilySweep,
    col_plus: FamilySweep,
    row_minus: FamilySweep,
    row_plus: FamilySweep,
    /// worst re-projection leak across the far sweeps
    pub far_leak: f64,
    rtol: f64,
}

/// Subsets the pipeline precomputes near-side coefficients for.
fn used_subsets() -> Vec<PartSet> {
    vec![
        PartSet::of(&[1]),
        PartSet::of(&[2]),
        PartSet::of(&[3]),
        PartSet::of(&[4]),
        PartSet::of(&[5]),
        PartSet::of(&[6]),
        PartSet::of(&[2, 3]),
        PartSet::of(&[4, 5, 6]),
        PartSet::of(&[5, 6]),
        PartSet::of(&[1, 4]),
        PartSet::of(&[2, 3, 5, 6]),
        PartSet::of(&[1, 2, 3]),
        PartSet::of(&[1, 2]),
    ]
}

/// Build the full pipeline; `shuffle` re-chooses the free lattice
/// complements with the seeded generator (used by invariance checks).
pub fn build_pipeline(
    spec: &ProblemSpec,
    cfg: &SolverConfig,
    shuffle: Option<u64>,
) -> Result<Pipeline> {
    cfg.validate()?;
    let alpha = problem::validate_condition_a(&spec.a_mat, cfg.split_tol)?;
    let anchor = nearzero::build_anchor(spec, cfg)?;
    let fundamental = nearzero::solve_u(spec, cfg, &anchor)?;
    let correction = nearzero::compute_correction(spec, cfg, &anchor)?;
    let x0 = fundamental.x0;
    let dichotomy = dichotomy::compute_dichotomy(spec, cfg, x0)?;
    let zero_decay = lattice::compute_zero_decay(&fundamental, &spec.a_mat, cfg.split_tol)?;
    let zero_limit = lattice::compute_zero_limit(&correction)?;
    let lattice = lattice::build_lattice(&zero_decay, &zero_limit, &dichotomy, alpha, cfg, shuffle)?;

    let power = PowerSplit::new(&spec.a_mat, 0.5)?;
    let epu_x0 = fundamental.e_plus_u(x0);
    let epu_x0_inv = epu_x0
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Structural("E + U singular at the anchor".into()))?;

    // near-side subset coefficients
    let t_user = -x0.ln();
    let mut subsets = BTreeMap::new();
    for set in used_subsets() {
        let parts = set.parts();
        let cols_b = lattice.basis_of(&parts);
        let dim = cols_b.ncols();
        let mut rows_d = Mat::zeros(dim, spec.n);
        {
            let mut at = 0;
            for &p in &parts {
                let d = lattice.parts[p - 1].dim();
                // dual rows of part p: rows of the decomposition inverse
                let dp = part_dual_rows(&lattice, p)?;
                rows_d.view_mut((at, 0), (d, spec.n)).copy_from(&dp);
                at += d;
            }
        }
        let inner_col = &epu_x0_inv * &cols_b; // n x dim
        let inner_row = &rows_d * &epu_x0; // dim x n
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        for g in 0..power.part_count() {
            let is_fast = power.re_ranges[g].0 > 1.0;
            // x0^{-A}-side factor e^{t_user M_g}
            let e_pos = mat_exp(&(&power.restricted[g] * t_user))?;
            let e_neg = mat_exp(&(&power.restricted[g] * (-t_user)))?;
            let mut ca_g = e_pos.clone() * &power.duals[g] * &inner_col;
            let mut cb_g = &inner_row * &power.bases[g] * e_neg;
            // structural zeros: the fast spectral family maps onto parts 1
            // and 4 only, and subsets inside parts 1/4 pull back into the
            // fast family only
            if set.avoids_fast() && is_fast {
                cb_g.fill(0.0);
            }
            if set.only_fast() && !is_fast {
                ca_g.fill(0.0);
            }
            ca.push(ca_g);
            cb.push(cb_g);
        }
        subsets.insert(set, SubsetData { dim, ca, cb });
    }

    // far-side sweeps along the dichotomy checkpoints
    let rtol = cfg.tol / 10.0;
    let cps = dichotomy.frames.checkpoints.clone();
    let mut far_leak: f64 = 0.0;

    let col_minus = sweep_columns(
        spec,
        &cps,
        &lattice.basis_of(&[1, 2, 3]),
        Some(&dichotomy.frames.stable),
        rtol,
        &mut far_leak,
    )?;
    let col_plus = sweep_columns(spec, &cps, &lattice.basis_of(&[4, 5, 6]), None, rtol, &mut far_leak)?;
    let row_plus = sweep_rows(
        spec,
        &cps,
        &stacked_duals(&lattice, &[4, 5, 6])?,
        Some(&dichotomy.frames.stable),
        rtol,
        &mut far_leak,
    )?;
    let row_minus = sweep_rows(
        spec,
        &cps,
        &stacked_duals(&lattice, &[1, 2, 3])?,
        Some(&col_plus.frames),
        rtol,
        &mut far_leak,
    )?;

    Ok(Pipeline {
        spec: spec.clone(),
        cfg: cfg.clone(),
        alpha,
        anchor,
        fundamental,
        correction,
        dichotomy,
        lattice,
        x0,
        x_inf: 0.0, // fixed up below
        power,
        subsets,
        col_minus,
        col_plus,
        row_minus,
        row_plus,
        far_leak,
        rtol,
    }
    .finish())
}

impl Pipeline {
    fn finish(mut self) -> Self {
        self.x_inf = self.dichotomy.x_inf;
        self
    }
}

fn qr_cols(z: &Mat) -> (Mat, Mat) {
    let k = z.ncols();
    if k == 0 {
        return (z.clone(), Mat::zeros(0, 0));
    }
    let qr = z.clone().qr();
    (qr.q().columns(0, k).into_owned(), qr.r().rows(0, k).into_owned())
}

/// rows of the decomposition inverse belonging to part p (1-based).
fn part_dual_rows(lat: &SubspaceLattice, p: usize) -> Result<Mat> {
    let t = lat.basis_of(&[1, 2, 3, 4, 5, 6]);
    let t_inv = t
        .lu()
        .try_inverse()
        .ok_or(Error::Decomposition { cond: f64::INFINITY })?;
    let mut at = 0;
    for j in 1..p {
        at += lat.parts[j - 1].dim();
    }
    Ok(t_inv.rows(at, lat.parts[p - 1].dim()).into_owned())
}

fn stacked_duals(lat: &SubspaceLattice, parts: &[usize]) -> Result<Mat> {
    let n = lat.n();
    let total: usize = parts.iter().map(|&p| lat.parts[p - 1].dim()).sum();
    let mut out = Mat::zeros(total, n);
    let mut at = 0;
    for &p in parts {
        let d = lat.parts[p - 1].dim();
        out.view_mut((at, 0), (d, n)).copy_from(&part_dual_rows(lat, p)?);
        at += d;
    }
    Ok(out)
}

fn sweep_columns(
    spec: &ProblemSpec,
    cps: &[f64],
    b0: &Mat,
    reproject: Option<&Vec<Mat>>,
    rtol: f64,
    leak: &mut f64,
) -> Result<FamilySweep> {
    let d = b0.ncols();
    let npts = cps.len();
    let mut frames = Vec::with_capacity(npts);
    let mut cums = Vec::with_capacity(npts);
    let (q0, r0) = qr_cols(b0);
    frames.push(q0);
    cums.push(r0);
    for j in 0..npts - 1 {
        let prop = dichotomy::propagate_columns(spec, cps[j], cps[j + 1], &frames[j], rtol)?;
        let cleaned = match reproject {
            Some(targets) => {
                let t = &targets[j + 1];
                let proj = t * (t.transpose() * &prop);
                *leak = (*leak).max((&prop - &proj).norm() / prop.norm().max(1e-300));
                proj
            }
            None => prop,
        };
        let (q, r) = qr_cols(&cleaned);
        if q.ncols() != d {
            return Err(Error::Structural("far column family lost rank during the sweep".into()));
        }
        cums.push(&r * &cums[j]);
        frames.push(q);
    }
    Ok(FamilySweep { frames, cums })
}

/// Rows sweep: frames are orthonormal row matrices (d x n); `annihilate`
/// gives, per checkpoint, an orthonormal column family the rows must kill.
fn sweep_rows(
    spec: &ProblemSpec,
    cps: &[f64],
    d0: &Mat,
    annihilate: Option<&Vec<Mat>>,
    rtol: f64,
    leak: &mut f64,
) -> Result<FamilySweep> {
    let d = d0.nrows();
    let n = d0.ncols();
    let npts = cps.len();
    let mut frames = Vec::with_capacity(npts);
    let mut cums = Vec::with_capacity(npts);
    let (q0, l0) = lq_rows(d0);
    frames.push(q0);
    cums.push(l0);
    for j in 0..npts - 1 {
        let prop = dichotomy::propagate_rows(spec, cps[j], cps[j + 1], &frames[j], rtol)?;
        let cleaned = match annihilate {
            Some(targets) => {
                let t = &targets[j + 1];
                if t.ncols() == 0 {
                    prop
                } else {
                    let removed = &prop * t * t.transpose();
                    *leak = (*leak).max(removed.norm() / prop.norm().max(1e-300));
                    prop - removed
                }
            }
            None => prop,
        };
        let (q, l) = lq_rows(&cleaned);
        if q.nrows() != d {
            return Err(Error::Structural("far row family lost rank during the sweep".into()));
        }
        cums.push(&cums[j] * &l);
        frames.push(q);
    }
    let _ = n;
    Ok(FamilySweep { frames, cums })
}

/// factor rows = L Q with orthonormal rows Q.
fn lq_rows(z: &Mat) -> (Mat, Mat) {
    let d = z.nrows();
    if d == 0 {
        return (z.clone(), Mat::zeros(0, 0));
    }
    let qr = z.transpose().qr();
    let q = qr.q().columns(0, d).transpose().into_owned();
    let l = qr.r().rows(0, d).transpose().into_owned();
    (q, l)
}

impl Pipeline {
    pub fn n(&self) -> usize {
        self.spec.n
    }

    fn checkpoint_below(&self, x: f64) -> usize {
        let cps = &self.dichotomy.frames.checkpoints;
        match cps.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(cps.len() - 1),
            Err(0) => 0,
            Err(j) => (j - 1).min(cps.len() - 1),
        }
    }

    /// E + U(x), valid on (0, x0].
    pub fn e_plus_u(&self, x: f64) -> Mat {
        self.fundamental.e_plus_u(x)
    }

    /// Column family Y(x; x0) B_S for any x in (0, X_inf].
    pub fn col(&self, set: PartSet, x: f64) -> Result<Mat> {
        if x <= 0.0 {
            return Err(Error::Domain("column family needs x > 0".into()));
        }
        if x <= self.x0 * (1.0 + 1e-12) {
            self.col_near(set, x)
        } else {
            self.col_far(set, x)
        }
    }

    /// Row family D_S Y^{-1}(s; x0) for any s in (0, X_inf].
    pub fn row(&self, set: PartSet, s: f64) -> Result<Mat> {
        if s <= 0.0 {
            return Err(Error::Domain("row family needs s > 0".into()));
        }
        if s <= self.x0 * (1.0 + 1e-12) {
            self.row_near(set, s)
        } else {
            self.row_far(set, s)
        }
    }

    /// Projected kernel Y(x; x0) P_S Y^{-1}(s; x0).
    pub fn kernel(&self, set: PartSet, x: f64, s: f64) -> Result<Mat> {
        Ok(self.col(set, x)? * self.row(set, s)?)
    }

    fn subset(&self, set: PartSet) -> &SubsetData {
        self.subsets
            .get(&set)
            .unwrap_or_else(|| panic!("part subset {:?} not precomputed", set.parts()))
    }

    fn col_near(&self, set: PartSet, x: f64) -> Result<Mat> {
        let sd = self.subset(set);
        let t = -x.ln();
        let n = self.n();
        let mut acc = Mat::zeros(n, sd.dim);
        for g in 0..self.power.part_count() {
            if sd.ca[g].iter().all(|v| *v == 0.0) {
                continue;
            }
            let e = mat_exp(&(&self.power.restricted[g] * (-t)))?;
            acc += &self.power.bases[g] * e * &sd.ca[g];
        }
        Ok(self.e_plus_u(x) * acc)
    }

    fn row_near(&self, set: PartSet, s: f64) -> Result<Mat> {
        let sd = self.subset(set);
        let tau = -s.ln();
        let n = self.n();
        let mut acc = Mat::zeros(sd.dim, n);
        for h in 0..self.power.part_count() {
            if sd.cb[h].iter().all(|v| *v == 0.0) {
                continue;
            }
            let e = mat_exp(&(&self.power.restricted[h] * tau))?;
            acc += &sd.cb[h] * e * &self.power.duals[h];
        }
        let epu_inv = self
            .e_plus_u(s)
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Structural(format!("E + U singular at {s}")))?;
        Ok(acc * epu_inv)
    }

    fn group_of(&self, set: PartSet) -> Result<(&FamilySweep, &FamilySweep, Vec<usize>)> {
        if set.in_decay_group() {
            Ok((&self.col_minus, &self.row_minus, vec![1, 2, 3]))
        } else if set.in_growth_group() {
            Ok((&self.col_plus, &self.row_plus, vec![4, 5, 6]))
        } else {
            Err(Error::Internal(format!(
                "far evaluation of the mixed subset {:?}",
                set.parts()
            )))
        }
    }

    /// 0/1 column selector of the subset inside its group basis ordering.
    fn group_selector(&self, set: PartSet, group: &[usize]) -> Mat {
        let total: usize = group.iter().map(|&p| self.lattice.parts[p - 1].dim()).sum();
        let dim: usize = set
            .parts()
            .iter()
            .map(|&p| self.lattice.parts[p - 1].dim())
            .sum();
        let mut sel = Mat::zeros(total, dim);
        let mut col = 0;
        let mut off = 0;
        for &p in group {
            let d = self.lattice.parts[p - 1].dim();
            if set.contains(p) {
                for k in 0..d {
                    sel[(off + k, col + k)] = 1.0;
                }
                col += d;
            }
            off += d;
        }
        sel
    }

    fn col_far(&self, set: PartSet, x: f64) -> Result<Mat> {
        let (cols, _, group) = self.group_of(set)?;
        let sel = self.group_selector(set, &group);
        let j = self.checkpoint_below(x);
        let cps = &self.dichotomy.frames.checkpoints;
        let frame = if (x - cps[j]).abs() < 1e-13 {
            cols.frames[j].clone()
        } else {
            dichotomy::propagate_columns(&self.spec, cps[j], x, &cols.frames[j], self.rtol)?
        };
        Ok(frame * &cols.cums[j] * sel)
    }

    fn row_far(&self, set: PartSet, s: f64) -> Result<Mat> {
        let (_, rows, group) = self.group_of(set)?;
        let sel = self.group_selector(set, &group).transpose();
        let j = self.checkpoint_below(s);
        let cps = &self.dichotomy.frames.checkpoints;
        let frame = if (s - cps[j]).abs() < 1e-13 {
            rows.frames[j].clone()
        } else {
            dichotomy::propagate_rows(&self.spec, cps[j], s, &rows.frames[j], self.rtol)?
        };
        Ok(sel * &rows.cums[j] * frame)
    }

    /// Limit of Y(x; x0) v as x -> 0, which exists exactly when the
    /// pullback of v has no components along spectral clusters with negative
    /// real parts (and no nilpotent mixing at zero). Returns the limit (a
    /// kernel vector of the residue matrix) and the defect of existence.
    pub fn zero_limit_coefficient(&self, v: &Vec64) -> Result<(Vec64, f64)> {
        let n = self.n();
        let epu_inv = self
            .e_plus_u(self.x0)
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Structural("E + U singular at the anchor".into()))?;
        let inner = epu_inv * v;
        let t_user = -self.x0.ln();
        let kb = &self.correction.kernel_basis;
        let mut limit = Vec64::zeros(n);
        let mut defect = 0.0f64;
        for g in 0..self.power.part_count() {
            let (lo, hi) = self.power.re_ranges[g];
            let coords = &self.power.duals[g] * &inner;
            let scaled = mat_exp(&(&self.power.restricted[g] * t_user))? * coords;
            let ambient = &self.power.bases[g] * scaled;
            if hi < -1e-9 {
                // x^A blows up along this cluster: no limit unless absent
                defect += ambient.norm();
            } else if lo <= 1e-9 && hi >= -1e-9 {
                // the zero cluster: the strict kernel component survives
                if kb.ncols() > 0 {
                    let proj = kb * (kb.transpose() * &ambient);
                    defect += (&ambient - &proj).norm();
                    limit += proj;
                } else {
                    defect += ambient.norm();
                }
            }
            // strictly positive clusters decay to zero under x^A
        }
        Ok((limit, defect))
    }

    /// Homogeneous solution Y(x; x0) v through the lattice decomposition.
    pub fn homogeneous(&self, x: f64, v: &Vec64) -> Result<Vec64> {
        let mut out = Vec64::zeros(self.n());
        for grp in [PartSet::of(&[1, 2, 3]), PartSet::of(&[4, 5, 6])] {
            let duals = stacked_duals(&self.lattice, &grp.parts())?;
            let coords = &duals * v;
            if coords.norm() == 0.0 {
                continue;
            }
            out += self.col(grp, x)? * coords;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// cumulative quadratures

/// Near-side cumulative integrals of the dual rows against a forcing:
/// j_h(tau) per spectral cluster h, sampled at the tau-panel boundaries.
pub struct NearCumulative {
    /// tau ladder, ascending from the anchor
    pub taus: Vec<f64>,
    /// per cluster: None when the cluster is excluded (fast clusters in the
    /// tail-reaching direction); otherwise per-boundary vectors
    pub per_cluster: Vec<Option<Vec<Vec64>>>,
    /// scalar cumulative of |rows| |g| for thresholds (full integral only)
    pub magnitude: f64,
}

impl Pipeline {
    fn near_tau_max(&self, g_scale: f64) -> f64 {
        // slowest admissible decay of the integrand: at least the spectral
        // gap to Re = 1 of the slow clusters
        let mut rate: f64 = 1.0;
        for (lo, hi) in &self.power.re_ranges {
            let _ = lo;
            if *hi < 1.0 {
                rate = rate.min(1.0 - *hi);
            }
        }
        let t_user = -self.x0.ln();
        let margin = ((10.0 * (1.0 + g_scale)) / (self.cfg.tol * rate)).ln() / rate;
        (t_user + margin.max(5.0)).min(t_user + 600.0)
    }

    /// Ascending cumulative from the origin: j_h(tau_k) = int_{0}^{e^{-tau_k}}
    /// s^{-M_h} D_h (E + U)^{-1} g(s) ds, for slow clusters h.
    pub fn near_ascending(&self, g: &dyn Fn(f64) -> Vec64, g_scale: f64) -> Result<NearCumulative> {
        let t_user = -self.x0.ln();
        let tau_max = self.near_tau_max(g_scale);
        let n_panels = ((tau_max - t_user) / TAU_PANEL).ceil() as usize;
        let taus: Vec<f64> = (0..=n_panels).map(|k| t_user + k as f64 * TAU_PANEL).collect();
        let parts = self.power.part_count();
        let mut per_cluster: Vec<Option<Vec<Vec64>>> = Vec::with_capacity(parts);
        let mut magnitude = 0.0f64;

        // panel-level integrand samples shared by clusters
        // node data: (tau, e^{-tau}, D_h-projected integrand per cluster)
        for h in 0..parts {
            if self.power.re_ranges[h].1 >= 1.0 {
                per_cluster.push(None);
                continue;
            }
            per_cluster.push(Some(vec![Vec64::zeros(self.power.bases[h].ncols()); n_panels + 1]));
        }

        let n = self.n();
        let mut tail_scale: f64 = 0.0;
        for k in (0..n_panels).rev() {
            let lo = taus[k];
            let hi = taus[k + 1];
            // per-cluster panel integrals
            let mut panel: Vec<Vec64> = (0..parts)
                .map(|h| Vec64::zeros(self.power.bases[h].ncols()))
                .collect();
            for (tau, w) in quad::gauss_legendre(6, lo, hi) {
                let s = (-tau).exp();
                let epu_inv = self
                    .e_plus_u(s)
                    .lu()
                    .try_inverse()
                    .ok_or_else(|| Error::Structural(format!("E + U singular at {s}")))?;
                let core = epu_inv * g(s) * s; // ds = -s dtau, orientation folded in
                let _ = n;
                for h in 0..parts {
                    if per_cluster[h].is_none() {
                        continue;
                    }
                    let e = mat_exp(&(&self.power.restricted[h] * tau))?;
                    panel[h] += e * (&self.power.duals[h] * &core) * w;
                }
                tail_scale = tail_scale.max(core.norm());
            }
            for h in 0..parts {
                if let Some(cum) = per_cluster[h].as_mut() {
                    let next = cum[k + 1].clone();
                    cum[k] = next + &panel[h];
                }
            }
        }
        // magnitude reference: |rows(s)| |g(s)| over the ladder (crude)
        let set = PartSet::of(&[5, 6]);
        if self.subset(set).dim > 0 {
            for k in 0..=n_panels.min(200) {
                let s = (-taus[k]).exp();
                if let Ok(r) = self.row_near(set, s) {
                    magnitude += r.norm() * g(s).norm() * s * TAU_PANEL;
                }
            }
        }
        Ok(NearCumulative { taus, per_cluster, magnitude })
    }

    /// Descending cumulative from the anchor: d_h(tau_k) =
    /// int_{e^{-tau_k}}^{x0} s^{-M_h} D_h (E + U)^{-1} g(s) ds, all clusters.
    pub fn near_descending(
        &self,
        g: &dyn Fn(f64) -> Vec64,
        tau_depth: f64,
    ) -> Result<NearCumulative> {
        let t_user = -self.x0.ln();
        let n_panels = (tau_depth / TAU_PANEL).ceil() as usize;
        let taus: Vec<f64> = (0..=n_panels).map(|k| t_user + k as f64 * TAU_PANEL).collect();
        let parts = self.power.part_count();
        let mut per_cluster: Vec<Option<Vec<Vec64>>> = (0..parts)
            .map(|h| Some(vec![Vec64::zeros(self.power.bases[h].ncols()); n_panels + 1]))
            .collect();
        for k in 0..n_panels {
            let lo = taus[k];
            let hi = taus[k + 1];
            let mut panel: Vec<Vec64> = (0..parts)
                .map(|h| Vec64::zeros(self.power.bases[h].ncols()))
                .collect();
            for (tau, w) in quad::gauss_legendre(6, lo, hi) {
                let s = (-tau).exp();
                let epu_inv = self
                    .e_plus_u(s)
                    .lu()
                    .try_inverse()
                    .ok_or_else(|| Error::Structural(format!("E + U singular at {s}")))?;
                let core = epu_inv * g(s) * s;
                for h in 0..parts {
                    let e = mat_exp(&(&self.power.restricted[h] * tau))?;
                    panel[h] += e * (&self.power.duals[h] * &core) * w;
                }
            }
            for h in 0..parts {
                if let Some(cum) = per_cluster[h].as_mut() {
                    let prev = cum[k].clone();
                    cum[k + 1] = prev + &panel[h];
                }
            }
        }
        Ok(NearCumulative { taus, per_cluster, magnitude: 0.0 })
    }

    /// Contract a near cumulative with the subset row coefficients at a
    /// ladder index: yields int row_S(s) g(s) ds over the covered range.
    pub fn contract_subset(&self, set: PartSet, cum: &NearCumulative, idx: usize) -> Vec64 {
        let sd = self.subset(set);
        let mut out = Vec64::zeros(sd.dim);
        for h in 0..self.power.part_count() {
            if let Some(c) = cum.per_cluster[h].as_ref() {
                if sd.cb[h].iter().all(|v| *v == 0.0) {
                    continue;
                }
                out += &sd.cb[h] * &c[idx];
            }
        }
        out
    }

    /// Far-side cumulative of a row group against g at every checkpoint:
    /// forward gives int_{x0}^{c_j}, backward gives int_{c_j}^{X_inf}.
    pub fn far_cumulative(
        &self,
        grow_side: bool,
        g: &dyn Fn(f64) -> Vec64,
        forward: bool,
    ) -> Result<Vec<Vec64>> {
        let rows = if grow_side { &self.row_plus } else { &self.row_minus };
        let cps = &self.dichotomy.frames.checkpoints;
        let npts = cps.len();
        let d = rows.frames[0].nrows();
        let mut out = vec![Vec64::zeros(d); npts];
        if d == 0 {
            return Ok(out);
        }
        // panel integrals per interval
        let mut panel = vec![Vec64::zeros(d); npts - 1];
        for j in 0..npts - 1 {
            let mut acc = Vec64::zeros(d);
            for (s, w) in quad::gauss_legendre(6, cps[j], cps[j + 1]) {
                let frame =
                    dichotomy::propagate_rows(&self.spec, cps[j], s, &rows.frames[j], self.rtol)?;
                acc += (&rows.cums[j] * frame) * g(s) * w;
            }
            panel[j] = acc;
        }
        if forward {
            for j in 0..npts - 1 {
                let prev = out[j].clone();
                out[j + 1] = prev + &panel[j];
            }
        } else {
            for j in (0..npts - 1).rev() {
                let next = out[j + 1].clone();
                out[j] = next + &panel[j];
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// term-sum forcings

/// Forcing closure from grammar entries.
pub fn forcing_from_terms(terms: &[TermSum]) -> impl Fn(f64) -> Vec64 + '_ {
    move |x: f64| Vec64::from_fn(terms.len(), |i, _| terms[i].eval(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::TermSum;
    use approx::assert_relative_eq;

    fn diag_b(d: &[f64]) -> Vec<Vec<TermSum>> {
        let n = d.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { TermSum::constant(d[i]) } else { TermSum::zero() })
                    .collect()
            })
            .collect()
    }

    fn p1_spec() -> ProblemSpec {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let ystar = vec![TermSum::term(1.0, 2, 1.0), TermSum::term(1.0, 1, 1.0)];
        problem::manufacture(&a, &diag_b(&[-1.0, -1.0]), &ystar).unwrap().0
    }

    fn p2_spec() -> ProblemSpec {
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        ProblemSpec::new(
            a,
            Vec64::zeros(2),
            diag_b(&[1.0, -1.0]),
            vec![TermSum::zero(), TermSum::zero()],
        )
        .unwrap()
    }

    fn p3_spec() -> ProblemSpec {
        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let ystar = vec![TermSum::term(1.0, 0, 1.0), TermSum::term(-1.0, 0, 1.0)];
        problem::manufacture(&a, &diag_b(&[-1.0, -1.0]), &ystar).unwrap().0
    }

    fn cfg_x0_1() -> SolverConfig {
        SolverConfig { x0: Some(1.0), ..SolverConfig::default() }
    }

    #[test]
    fn lattice_dims_and_index_p1_p2_p3() {
        let p1 = build_pipeline(&p1_spec(), &cfg_x0_1(), None).unwrap();
        assert_eq!(p1.lattice.dims, [1, 0, 1, 0, 0, 0]);
        assert_eq!(lattice::noether_index(&p1.lattice), (1, 0, 1));

        let p2 = build_pipeline(&p2_spec(), &cfg_x0_1(), None).unwrap();
        assert_eq!(p2.lattice.dims, [1, 0, 0, 0, 0, 1]);
        assert_eq!(lattice::noether_index(&p2.lattice), (1, 1, 0));

        let p3 = build_pipeline(&p3_spec(), &cfg_x0_1(), None).unwrap();
        assert_eq!(p3.lattice.dims, [1, 1, 0, 0, 0, 0]);
        assert_eq!(lattice::noether_index(&p3.lattice), (1, 0, 1));
    }

    #[test]
    fn lattice_algebra_and_metric() {
        for spec in [p1_spec(), p2_spec(), p3_spec()] {
            let p = build_pipeline(&spec, &cfg_x0_1(), None).unwrap();
            assert!(p.lattice.projector_defect() < 1e-8, "defect {}", p.lattice.projector_defect());
            assert!(
                p.lattice.metric_selfadjoint_defect() < 1e-8,
                "metric defect {}",
                p.lattice.metric_selfadjoint_defect()
            );
            // combination projectors
            let q_sum = &p.lattice.proj_zero_fast + &p.lattice.proj_zero_slow;
            assert_relative_eq!((q_sum - Mat::identity(2, 2)).norm(), 0.0, epsilon = 1e-9);
            let p_sum = &p.lattice.proj_inf_decay + &p.lattice.proj_inf_growth;
            assert_relative_eq!((p_sum - Mat::identity(2, 2)).norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn shuffle_preserves_dims_and_index() {
        for spec in [p1_spec(), p2_spec(), p3_spec()] {
            let base = build_pipeline(&spec, &cfg_x0_1(), None).unwrap();
            for seed in [7u64, 1234] {
                let shuffled = build_pipeline(&spec, &cfg_x0_1(), Some(seed)).unwrap();
                assert_eq!(base.lattice.dims, shuffled.lattice.dims);
                assert_eq!(
                    lattice::noether_index(&base.lattice),
                    lattice::noether_index(&shuffled.lattice)
                );
            }
        }
    }

    #[test]
    fn near_kernel_closed_forms_p1() {
        let p = build_pipeline(&p1_spec(), &cfg_x0_1(), None).unwrap();
        // part 1 kernel at (0.5, 0.8): diag((x/s)^2 e^{-(x-s)}, 0)
        let k = p.kernel(PartSet::of(&[1]), 0.5, 0.8).unwrap();
        let expect = (0.5f64 / 0.8).powi(2) * (0.3f64).exp();
        assert_relative_eq!(k[(0, 0)], expect, epsilon = 1e-7);
        assert!(k[(1, 1)].abs() < 1e-9);
        assert_relative_eq!(expect, 0.5272886, epsilon = 1e-7);

        // part 3 kernel at (0.5, 0.25): diag(0, (x/s)^{-1} e^{-(x-s)})
        let k = p.kernel(PartSet::of(&[3]), 0.5, 0.25).unwrap();
        assert_relative_eq!(k[(1, 1)], 0.5 * (-0.25f64).exp(), epsilon = 1e-7);
        assert!(k[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn far_kernel_matches_closed_form_p1() {
        let p = build_pipeline(&p1_spec(), &cfg_x0_1(), None).unwrap();
        // full decaying group = everything for this problem: Y(2; 1)
        let k = p.kernel(PartSet::of(&[1, 2, 3]), 2.0, 1.0).unwrap();
        assert_relative_eq!(k[(0, 0)], 4.0 * (-1.0f64).exp(), epsilon = 1e-6);
        assert_relative_eq!(k[(1, 1)], 0.5 * (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn cross_region_kernel_p1() {
        let p = build_pipeline(&p1_spec(), &cfg_x0_1(), None).unwrap();
        // Y(x) P1 Y^{-1}(s) with x = 2 (far), s = 0.5 (near):
        // mode x^2 e^{-x}: (4 e^{-2}) / (0.25 e^{-0.5}) = 16 e^{-1.5}
        let k = p.kernel(PartSet::of(&[1]), 2.0, 0.5).unwrap();
        assert_relative_eq!(k[(0, 0)], 16.0 * (-1.5f64).exp(), epsilon = 1e-6);
        // and the reverse orientation for the growth-side subset of p2
        let p2 = build_pipeline(&p2_spec(), &cfg_x0_1(), None).unwrap();
        // L6 is the sqrt(x) e^x mode on e1: Y(0.5)P6Y^{-1}(2)
        let k = p2.kernel(PartSet::of(&[6]), 0.5, 2.0).unwrap();
        let expect = (0.5f64 / 2.0).sqrt() * (0.5f64 - 2.0).exp();
        assert_relative_eq!(k[(0, 0)], expect, epsilon = 1e-6);
        assert!(k[(1, 1)].abs() < 1e-8);
    }

    #[test]
    fn homogeneous_matches_modes() {
        let p = build_pipeline(&p1_spec(), &cfg_x0_1(), None).unwrap();
        let v = Vec64::from_column_slice(&[1.0, 0.5]);
        // Y(x;1) v = (x^2 e^{-(x-1)}, 0.5 x^{-1} e^{-(x-1)})
        for &x in &[0.3, 1.0, 2.5, 6.0] {
            let y = p.homogeneous(x, &v).unwrap();
            assert_relative_eq!(y[0], x * x * (-(x - 1.0)).exp(), epsilon = 2e-6);
            assert_relative_eq!(y[1], 0.5 / x * (-(x - 1.0)).exp(), epsilon = 2e-6);
        }
    }

    #[test]
    fn zero_decay_and_zero_limit_bases() {
        let p1 = build_pipeline(&p1_spec(), &cfg_x0_1(), None).unwrap();
        assert_eq!(p1.lattice.zero_decay.dim(), 1);
        assert_relative_eq!(p1.lattice.zero_decay.columns[(0, 0)].abs(), 1.0, epsilon = 1e-8);
        assert_eq!(p1.lattice.zero_limit.dim(), 0);

        let p3 = build_pipeline(&p3_spec(), &cfg_x0_1(), None).unwrap();
        assert_eq!(p3.lattice.zero_limit.dim(), 1);
        assert_relative_eq!(p3.lattice.zero_limit.columns[(0, 0)].abs(), 1.0, epsilon = 1e-7);
    }
}
