//! Six-part classification of initial values at the anchor point.
//!
//! Solutions of the homogeneous system are sorted by their behavior at the
//! origin (fast decay x^{1+alpha}, finite limit in ker A, slow/singular
//! x^{1-alpha}) crossed with their behavior at infinity (decay e^{-gamma x}
//! versus growth). The resulting direct sum of six subspaces carries the
//! projector algebra every solvability statement is phrased in, the adapted
//! metric making the projectors self-adjoint, and the Noether index of the
//! solution operator.
//!
//! Part indices (0-based in code, 1-based in reports):
//!   1: fast at zero  and decaying at infinity   (the solution kernel)
//!   2: finite limit  and decaying at infinity
//!   3: singular      and decaying at infinity
//!   4: fast at zero  and growing at infinity
//!   5: finite limit  and growing at infinity
//!   6: singular      and growing at infinity
//! Parts 5 and 6 together span the cokernel directions.

use crate::dichotomy::DichotomyData;
use crate::error::{Error, Result};
use crate::linalg::{
    self, hstack, orthonormalize, projectors_from_decomposition, subspace_complement,
    subspace_intersect, Mat, Metric, SubspaceBasis, Vec64,
};
use crate::nearzero::{FundamentalNearZero, KernelCorrection};
use crate::problem::SolverConfig;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SUB_TOL: f64 = 1e-8;

/// Initial values (at the anchor) of solutions decaying like x^{1+alpha} at
/// the origin: the image of the fast spectral subspace of the residue under
/// the fundamental correction.
pub fn compute_zero_decay(
    fundamental: &FundamentalNearZero,
    a_mat: &Mat,
    split_tol: f64,
) -> Result<SubspaceBasis> {
    let split = linalg::spectral_split_strict(a_mat, 1.0, split_tol)?;
    let basis = split.basis_above(1e-10);
    if basis.dim() == 0 {
        return Ok(SubspaceBasis::zero(a_mat.nrows()));
    }
    let dressed = fundamental.e_plus_u(fundamental.x0) * &basis.columns;
    Ok(SubspaceBasis::new(orthonormalize(&dressed, None, 1e-12)))
}

/// Initial values of the continuously differentiable solutions attached to
/// ker A: the image of the kernel under the correction map at the anchor.
pub fn compute_zero_limit(correction: &KernelCorrection) -> Result<SubspaceBasis> {
    let n = correction.kernel_basis.nrows();
    if correction.dim() == 0 {
        return Ok(SubspaceBasis::zero(n));
    }
    let m = correction.map_at_x0();
    let basis = orthonormalize(&m, None, 1e-10);
    if basis.ncols() != correction.dim() {
        return Err(Error::Structural(
            "correction map degenerate: kernel image lost rank at the anchor".into(),
        ));
    }
    Ok(SubspaceBasis::new(basis))
}

/// The six-part decomposition with its projector algebra and adapted metric.
pub struct SubspaceLattice {
    pub parts: Vec<SubspaceBasis>,
    pub projectors: Vec<Mat>,
    pub dims: [usize; 6],
    /// projector onto the fast-at-zero family (parts 1 and 4)
    pub proj_zero_fast: Mat,
    /// complement of the above (parts 2, 3, 5, 6)
    pub proj_zero_slow: Mat,
    /// projector onto the decaying-at-infinity family (parts 1, 2, 3)
    pub proj_inf_decay: Mat,
    /// complement of the above (parts 4, 5, 6)
    pub proj_inf_growth: Mat,
    /// projector onto the cokernel directions (parts 5 and 6)
    pub cokernel_proj: Mat,
    pub metric: Metric,
    pub alpha: f64,
    pub gamma: f64,
    pub zero_decay: SubspaceBasis,
    pub zero_limit: SubspaceBasis,
}

impl SubspaceLattice {
    pub fn n(&self) -> usize {
        self.parts[0].ambient_dim
    }

    /// P_j, 1-based.
    pub fn p(&self, j: usize) -> &Mat {
        &self.projectors[j - 1]
    }

    /// Sum of selected projectors, 1-based indices.
    pub fn proj_sum(&self, parts: &[usize]) -> Mat {
        let n = self.n();
        let mut out = Mat::zeros(n, n);
        for &j in parts {
            out += self.p(j);
        }
        out
    }

    /// Basis matrix of selected parts side by side, 1-based indices.
    pub fn basis_of(&self, parts: &[usize]) -> Mat {
        hstack(
            &parts
                .iter()
                .map(|&j| self.parts[j - 1].columns.clone())
                .collect::<Vec<_>>(),
        )
    }

    /// Worst defect of the projector algebra (sum to identity, disjointness).
    pub fn projector_defect(&self) -> f64 {
        let n = self.n();
        let mut sum = Mat::zeros(n, n);
        let mut worst: f64 = 0.0;
        for (i, p) in self.projectors.iter().enumerate() {
            sum += p;
            worst = worst.max((p * p - p).norm());
            for (j, q) in self.projectors.iter().enumerate() {
                if i != j {
                    worst = worst.max((p * q).norm());
                }
            }
        }
        worst.max((sum - Mat::identity(n, n)).norm())
    }

    /// Worst defect of self-adjointness in the adapted metric.
    pub fn metric_selfadjoint_defect(&self) -> f64 {
        let w = &self.metric.w;
        self.projectors
            .iter()
            .map(|p| (w * p - p.transpose() * w).norm())
            .fold(0.0, f64::max)
    }
}

/// Metric in which the parts are mutually orthogonal: W = T^{-T} T^{-1} for
/// the concatenated part bases T.
pub fn adapted_metric(parts: &[SubspaceBasis]) -> Result<Metric> {
    let t = hstack(&parts.iter().map(|p| p.columns.clone()).collect::<Vec<_>>());
    if t.nrows() != t.ncols() {
        return Err(Error::Dimension("parts do not fill the ambient space".into()));
    }
    let t_inv = t.clone().lu().try_inverse().ok_or(Error::Decomposition {
        cond: f64::INFINITY,
    })?;
    Metric::new(t_inv.transpose() * &t_inv)
}

/// Optional seeded re-mixing of a free complement: tilts `complement` by a
/// random graph over the `fixed` directions, staying a valid complement.
fn mix_complement(
    complement: &SubspaceBasis,
    fixed: &Mat,
    rng: &mut Option<ChaCha8Rng>,
) -> SubspaceBasis {
    let Some(rng) = rng.as_mut() else {
        return complement.clone();
    };
    let k = complement.dim();
    if k == 0 || fixed.ncols() == 0 {
        return complement.clone();
    }
    let z = Mat::from_fn(fixed.ncols(), k, |_, _| rng.gen_range(-0.4..0.4));
    let tilted = &complement.columns + fixed * z;
    SubspaceBasis::new(orthonormalize(&tilted, None, 1e-12))
}

/// Build the lattice from the two origin-side subspaces and the dichotomy.
///
/// `shuffle` seeds a random re-choice of the free complements; the dims, the
/// index, and every solvability verdict are invariant under it.
pub fn build_lattice(
    zero_decay: &SubspaceBasis,
    zero_limit: &SubspaceBasis,
    dich: &DichotomyData,
    alpha: f64,
    _cfg: &SolverConfig,
    shuffle: Option<u64>,
) -> Result<SubspaceLattice> {
    let n = zero_decay.ambient_dim;
    let mut rng = shuffle.map(ChaCha8Rng::seed_from_u64);
    let euclid = Metric::euclidean(n);

    // transversality of the two origin-side families
    let meet = subspace_intersect(zero_decay, zero_limit, SUB_TOL)?;
    if meet.dim() > 0 {
        return Err(Error::Structural(
            "fast-decay and finite-limit families intersect nontrivially at the anchor".into(),
        ));
    }
    let u_minus = &dich.u_minus;

    // span of both origin-side families
    let vv = SubspaceBasis::new(orthonormalize(
        &hstack(&[zero_decay.columns.clone(), zero_limit.columns.clone()]),
        None,
        1e-12,
    ));
    if vv.dim() != zero_decay.dim() + zero_limit.dim() {
        return Err(Error::Structural(
            "origin-side families lost rank when joined".into(),
        ));
    }

    // part 1: decaying both ways
    let l1 = subspace_intersect(u_minus, zero_decay, SUB_TOL)?;
    // parts 1+2: decaying at infinity with a C1 continuation through 0
    let i12 = subspace_intersect(u_minus, &vv, SUB_TOL)?;
    let l2 = mix_complement(
        &subspace_complement(&l1, &i12, &euclid)?,
        &l1.columns,
        &mut rng,
    );
    // part 3: rest of the decaying family
    let l3 = mix_complement(
        &subspace_complement(&i12, u_minus, &euclid)?,
        &i12.columns,
        &mut rng,
    );
    // part 4: rest of the fast-at-zero family
    let l4 = mix_complement(
        &subspace_complement(&l1, zero_decay, &euclid)?,
        &l1.columns,
        &mut rng,
    );
    // part 5: completes 1 + 2 + 4 inside the joint family, chosen inside the
    // finite-limit family
    let x124 = SubspaceBasis::new(orthonormalize(
        &hstack(&[l1.columns.clone(), l2.columns.clone(), l4.columns.clone()]),
        None,
        1e-12,
    ));
    let x_cap_v0 = subspace_intersect(&x124, zero_limit, SUB_TOL)?;
    let l5 = mix_complement(
        &subspace_complement(&x_cap_v0, zero_limit, &euclid)?,
        &x_cap_v0.columns,
        &mut rng,
    );
    if l2.dim() + l5.dim() != zero_limit.dim() {
        return Err(Error::Internal(format!(
            "limit-family bookkeeping broken: {} + {} != {}",
            l2.dim(),
            l5.dim(),
            zero_limit.dim()
        )));
    }
    // part 6: completes everything to the ambient space
    let front = SubspaceBasis::new(orthonormalize(
        &hstack(&[
            l1.columns.clone(),
            l2.columns.clone(),
            l3.columns.clone(),
            l4.columns.clone(),
            l5.columns.clone(),
        ]),
        None,
        1e-12,
    ));
    let l6 = mix_complement(
        &subspace_complement(&front, &SubspaceBasis::full(n), &euclid)?,
        &front.columns,
        &mut rng,
    );

    let parts = vec![l1, l2, l3, l4, l5, l6];
    let dims = [
        parts[0].dim(),
        parts[1].dim(),
        parts[2].dim(),
        parts[3].dim(),
        parts[4].dim(),
        parts[5].dim(),
    ];
    if dims.iter().sum::<usize>() != n {
        return Err(Error::Internal(format!(
            "lattice dims {dims:?} do not sum to the dimension {n}"
        )));
    }
    let metric = adapted_metric(&parts)?;
    let projectors = projectors_from_decomposition(&parts)?;

    let sum = |idx: &[usize]| -> Mat {
        let mut out = Mat::zeros(n, n);
        for &j in idx {
            out += &projectors[j - 1];
        }
        out
    };
    let proj_zero_fast = sum(&[1, 4]);
    let proj_zero_slow = sum(&[2, 3, 5, 6]);
    let proj_inf_decay = sum(&[1, 2, 3]);
    let proj_inf_growth = sum(&[4, 5, 6]);
    let cokernel_proj = sum(&[5, 6]);

    Ok(SubspaceLattice {
        parts,
        projectors,
        dims,
        proj_zero_fast,
        proj_zero_slow,
        proj_inf_decay,
        proj_inf_growth,
        cokernel_proj,
        metric,
        alpha,
        gamma: dich.gamma,
        zero_decay: zero_decay.clone(),
        zero_limit: zero_limit.clone(),
    })
}

/// Kernel/cokernel dimensions and the index of the solution operator.
pub fn noether_index(lattice: &SubspaceLattice) -> (usize, usize, i64) {
    let n_l = lattice.dims[0];
    let d_l = lattice.dims[4] + lattice.dims[5];
    (n_l, d_l, n_l as i64 - d_l as i64)
}

/// Result of classifying one initial value.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Classification {
    /// 1..6, or 0 for a mixed vector
    pub part: usize,
    pub mixed: bool,
    /// fitted power of |y| near the origin (d log|y| / d log x)
    pub origin_exponent: f64,
    /// fitted rate of log|y| near the truncation point
    pub infinity_rate: f64,
    /// which asymptotic certificates hold
    pub fast_at_zero: bool,
    pub finite_limit_at_zero: bool,
    pub singular_at_zero: bool,
    pub decays_at_infinity: bool,
}

/// Classify an initial value at the anchor by its dominant part, with a
/// sampled asymptotic certificate. `eval` must produce the homogeneous
/// solution through y0 at any x in (0, x_inf].
pub fn classify_solution(
    y0: &Vec64,
    lattice: &SubspaceLattice,
    x0: f64,
    x_inf: f64,
    eval: &dyn Fn(f64) -> Vec64,
) -> Classification {
    let norms: Vec<f64> = (1..=6).map(|j| (lattice.p(j) * y0).norm()).collect();
    let (best_idx, best) = norms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let residual = (y0 - lattice.p(best_idx + 1) * y0).norm();
    let mixed = residual > 1e-6 * y0.norm().max(1e-300) || *best == 0.0;

    // origin exponent: log-log slope over a decade below the anchor
    let xs = [x0 * 1e-3, x0 * 3e-3, x0 * 1e-2];
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for &x in &xs {
        let v = eval(x).norm();
        if v > 0.0 {
            pts.push((x.ln(), v.ln()));
        }
    }
    let origin_exponent = slope(&pts);
    // infinity rate: log slope on the last stretch before the truncation
    let tail = [x_inf - 4.0, x_inf - 2.0, x_inf - 0.5];
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for &x in &tail {
        if x > x0 {
            let v = eval(x).norm();
            if v > 0.0 {
                pts.push((x, v.ln()));
            }
        }
    }
    let infinity_rate = slope(&pts);

    let alpha = lattice.alpha;
    let gamma = lattice.gamma;
    Classification {
        part: if mixed { 0 } else { best_idx + 1 },
        mixed,
        origin_exponent,
        infinity_rate,
        fast_at_zero: origin_exponent >= 1.0 + 0.5 * alpha,
        finite_limit_at_zero: origin_exponent.abs() <= 0.5 * (1.0 - alpha).max(0.2),
        singular_at_zero: origin_exponent <= 1.0 - 0.5 * alpha && origin_exponent.abs() > 0.2,
        decays_at_infinity: infinity_rate <= -0.5 * gamma,
    }
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
