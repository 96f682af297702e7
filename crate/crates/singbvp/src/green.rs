//! Green kernel of the homogeneous-boundary problem and its generalized form.
//!
//! The base kernel G is the usual piecewise product of projected evolution
//! kernels. In the resonant case it is corrected by a rank-deficiency term
//! built from the solution-kernel Gram operator and by a particular solution
//! driven by a biorthonormal forcing profile
//!
//! ```text
//! F(x) = kappa^{1+beta} x^beta / (Gamma(1+beta) e^{kappa x}) Y(x) Pi,
//! ```
//!
//! whose primitive has the closed form Y(x) Pi (1 - P(1+beta, kappa x)) in
//! terms of the regularized lower incomplete gamma function.

use crate::error::{Error, Result};
use crate::kernels::{PartSet, Pipeline};
use crate::linalg::{ln_gamma, reg_lower_gamma, Mat};
use crate::quad;
use serde::Serialize;

/// Tolerance-stamped outcome of one battery check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub status: String, // "pass" | "fail" | "skipped"
}

impl CheckOutcome {
    fn new(name: &str, value: f64, threshold: f64) -> Self {
        let status = if value <= threshold { "pass" } else { "fail" };
        Self { name: name.into(), value, threshold, status: status.into() }
    }
    fn skipped(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, status: "skipped".into() }
    }
    pub fn passed(&self) -> bool {
        self.status != "fail"
    }
}

/// Assembled Green data for one pipeline.
pub struct GreenAssembly<'a> {
    pub pipe: &'a Pipeline,
    pub kappa: f64,
    pub beta: f64,
    /// Gram matrix of the solution-kernel frame in the weighted L2 product,
    /// in the coordinates of the part-1 basis.
    pub gram: Mat,
    gram_inv: Option<Mat>,
    /// near-side descending moments per subset on the tau ladder:
    /// int_{e^-tau}^{x0} colK^T W col_S dx
    near_desc: [Vec<Mat>; 3],
    near_taus: Vec<f64>,
    /// full near moments int_0^{x0} for the subsets integrable at the origin
    full_near_1: Mat,
    full_near_456: Mat,
    /// far cumulative moments per checkpoint: int_{x0}^{c_j}
    far_minus: Vec<Mat>,
    far_plus: Vec<Mat>,
    /// weighted moment against the forcing primitive column
    primitive_moment: Mat,
}

const SUB1: usize = 0;
const SUB23: usize = 1;
const SUB456: usize = 2;

fn subsets() -> [PartSet; 3] {
    [PartSet::of(&[1]), PartSet::of(&[2, 3]), PartSet::of(&[4, 5, 6])]
}

/// Build the assembly: quadrature moments on both grids plus tail estimates.
pub fn build_green<'a>(pipe: &'a Pipeline) -> Result<GreenAssembly<'a>> {
    let gamma = pipe.dichotomy.gamma;
    let kappa = pipe.cfg.kappa_for(gamma);
    if kappa <= gamma {
        return Err(Error::Domain(format!(
            "kappa = {kappa} must exceed the dichotomy rate {gamma}"
        )));
    }
    let beta = pipe.cfg.beta_for(&pipe.spec.a_mat);
    for l in pipe.spec.a_mat.complex_eigenvalues().iter() {
        if l.re <= -beta {
            return Err(Error::Domain(format!(
                "beta = {beta} must exceed the negated spectral abscissa (eigenvalue {})",
                l.re
            )));
        }
    }

    let w = &pipe.lattice.metric.w;
    let d1 = pipe.lattice.dims[0];
    let x0 = pipe.x0;
    let t_user = -x0.ln();

    // tau ladder for the near moments: deep enough that the slowest
    // integrand x^{(1+alpha) + min lambda} has fully converged or hit the
    // representable floor
    let depth: f64 = 60.0;
    let n_panels = (depth / 0.25).ceil() as usize;
    let taus: Vec<f64> = (0..=n_panels).map(|k| t_user + 0.25 * k as f64).collect();

    let sets = subsets();
    let mut near_desc: [Vec<Mat>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut full_tail: [Mat; 3] = [
        Mat::zeros(d1, dim_of(pipe, sets[0])),
        Mat::zeros(d1, dim_of(pipe, sets[1])),
        Mat::zeros(d1, dim_of(pipe, sets[2])),
    ];
    let col_k = |x: f64| pipe.col(PartSet::of(&[1]), x);
    for (si, set) in sets.iter().enumerate() {
        let dim = dim_of(pipe, *set);
        let mut cum = vec![Mat::zeros(d1, dim)];
        for k in 0..n_panels {
            let mut panel = Mat::zeros(d1, dim);
            for (tau, wq) in quad::gauss_legendre(6, taus[k], taus[k + 1]) {
                let x = (-tau).exp();
                let c1 = col_k(x)?;
                let cs = pipe.col(*set, x)?;
                // dx = -x dtau; orientation folded into the descending sweep
                panel += (c1.transpose() * w * cs) * (wq * x);
            }
            let prev = cum[k].clone();
            cum.push(prev + panel);
        }
        // tail beyond the ladder: only the origin-integrable subsets keep it
        full_tail[si] = cum[n_panels].clone();
        near_desc[si] = cum;
    }
    let full_near_1 = full_tail[SUB1].clone();
    let full_near_456 = full_tail[SUB456].clone();

    // far cumulative moments along the checkpoints
    let cps = pipe.dichotomy.frames.checkpoints.clone();
    let d_minus = dim_of(pipe, PartSet::of(&[1, 2, 3]));
    let d_plus = dim_of(pipe, PartSet::of(&[4, 5, 6]));
    let mut far_minus = vec![Mat::zeros(d1, d_minus)];
    let mut far_plus = vec![Mat::zeros(d1, d_plus)];
    let mut primitive_moment = Mat::zeros(d1, dim_of(pipe, PartSet::of(&[5, 6])));
    // near part of the primitive moment
    for k in 0..n_panels {
        let mut panel = Mat::zeros(d1, primitive_moment.ncols());
        for (tau, wq) in quad::gauss_legendre(6, taus[k], taus[k + 1]) {
            let x = (-tau).exp();
            let c1 = col_k(x)?;
            let c56 = pipe.col(PartSet::of(&[5, 6]), x)?;
            let weight = 1.0 - reg_lower_gamma(1.0 + beta, kappa * x)?;
            panel += (c1.transpose() * w * c56) * (wq * x * weight);
        }
        primitive_moment += panel;
    }
    for j in 0..cps.len() - 1 {
        let mut pm = Mat::zeros(d1, d_minus);
        let mut pp = Mat::zeros(d1, d_plus);
        let mut pn = Mat::zeros(d1, primitive_moment.ncols());
        for (x, wq) in quad::gauss_legendre(6, cps[j], cps[j + 1]) {
            let c1 = col_k(x)?;
            let cm = pipe.col(PartSet::of(&[1, 2, 3]), x)?;
            let cp = pipe.col(PartSet::of(&[4, 5, 6]), x)?;
            pm += (c1.transpose() * w * cm) * wq;
            if d_plus > 0 {
                pp += (c1.transpose() * w * cp) * wq;
                let c56 = pipe.col(PartSet::of(&[5, 6]), x)?;
                let weight = 1.0 - reg_lower_gamma(1.0 + beta, kappa * x)?;
                pn += (c1.transpose() * w * c56) * (wq * weight);
            }
        }
        let prev_m = far_minus[j].clone();
        far_minus.push(prev_m + pm);
        let prev_p = far_plus[j].clone();
        far_plus.push(prev_p + pp);
        primitive_moment += pn;
    }

    // Gram of the part-1 frame: near + far + analytic infinity tail
    let mut gram = {
        let sel = full_near_1.columns(0, d1).into_owned();
        sel
    };
    if d1 > 0 {
        let far_last = far_minus.last().unwrap();
        // the part-1 block sits first in the decay-group ordering
        gram += far_last.columns(0, d1).into_owned();
        // infinity tail: integrand decays like e^{-2 gamma (x - x0)}
        let x_end = *cps.last().unwrap();
        let c1_end = col_k(x_end)?;
        let tail = (c1_end.transpose() * w * &c1_end) / (2.0 * gamma);
        gram += tail;
    }
    let gram_inv = if d1 > 0 {
        let sym = (gram.transpose() + &gram) * 0.5;
        let inv = sym
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Accuracy("solution-kernel Gram is singular".into()))?;
        let svd = sym.svd(false, false);
        let cond = svd.singular_values.max() / svd.singular_values.min().max(1e-300);
        if cond > 1e12 {
            return Err(Error::Accuracy(format!(
                "solution-kernel Gram condition number {cond:e}"
            )));
        }
        Some(inv)
    } else {
        None
    };

    Ok(GreenAssembly {
        pipe,
        kappa,
        beta,
        gram,
        gram_inv,
        near_desc,
        near_taus: taus,
        full_near_1,
        full_near_456,
        far_minus,
        far_plus,
        primitive_moment,
    })
}

fn dim_of(pipe: &Pipeline, set: PartSet) -> usize {
    set.parts()
        .iter()
        .map(|&p| pipe.lattice.parts[p - 1].dim())
        .sum()
}

impl<'a> GreenAssembly<'a> {
    fn x0(&self) -> f64 {
        self.pipe.x0
    }
    fn x_inf(&self) -> f64 {
        self.pipe.x_inf
    }

    /// The base kernel G(x, s) from the two-sided case table.
    pub fn eval_base(&self, x: f64, s: f64) -> Result<Mat> {
        let n = self.pipe.n();
        if x <= 0.0 || s <= 0.0 {
            return Err(Error::Domain("kernel arguments must be positive".into()));
        }
        let eps = 1e-12;
        if x > self.x_inf() * (1.0 + eps) || s > self.x_inf() * (1.0 + eps) {
            return Err(Error::Domain("kernel arguments beyond the truncation point".into()));
        }
        let x0 = self.x0();
        let mut g = Mat::zeros(n, n);
        if s <= x {
            g += self.pipe.kernel(PartSet::of(&[2, 3]), x, s)?;
            if s >= x0 {
                g += self.pipe.kernel(PartSet::of(&[1]), x, s)?;
            }
        } else {
            g -= self.pipe.kernel(PartSet::of(&[4, 5, 6]), x, s)?;
            if s < x0 && x < s {
                g -= self.pipe.kernel(PartSet::of(&[1]), x, s)?;
            }
        }
        Ok(g)
    }

    fn forcing_scalar(&self, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        let log = (1.0 + self.beta) * self.kappa.ln() + self.beta * x.ln()
            - self.kappa * x
            - ln_gamma(1.0 + self.beta);
        Ok(log.exp())
    }

    /// Biorthonormal forcing profile F(x).
    pub fn eval_forcing(&self, x: f64) -> Result<Mat> {
        let n = self.pipe.n();
        if dim_of(self.pipe, PartSet::of(&[5, 6])) == 0 {
            return Ok(Mat::zeros(n, n));
        }
        if x <= 0.0 {
            return Ok(Mat::zeros(n, n));
        }
        let scalar = self.forcing_scalar(x)?;
        let col = self.pipe.col(PartSet::of(&[5, 6]), x)?;
        let duals = self.cokernel_duals()?;
        Ok(col * duals * scalar)
    }

    fn cokernel_duals(&self) -> Result<Mat> {
        // constant dual rows of parts 5 and 6 at the anchor
        let lat = &self.pipe.lattice;
        let t = lat.basis_of(&[1, 2, 3, 4, 5, 6]);
        let t_inv = t
            .lu()
            .try_inverse()
            .ok_or(Error::Decomposition { cond: f64::INFINITY })?;
        let offset: usize = lat.dims[..4].iter().sum();
        let d = lat.dims[4] + lat.dims[5];
        Ok(t_inv.rows(offset, d).into_owned())
    }

    /// Particular solution N(x) of the forcing identity, in closed form.
    pub fn eval_primitive(&self, x: f64) -> Result<Mat> {
        let n = self.pipe.n();
        if dim_of(self.pipe, PartSet::of(&[5, 6])) == 0 || x <= 0.0 {
            return Ok(Mat::zeros(n, n));
        }
        let weight = 1.0 - reg_lower_gamma(1.0 + self.beta, self.kappa * x)?;
        let col = self.pipe.col(PartSet::of(&[5, 6]), x)?;
        Ok(col * self.cokernel_duals()? * weight)
    }

    /// Moment of the base kernel against the weighted solution-kernel frame:
    /// int_0^inf colK(x)^T W G(x, s) dx, factored through cumulative moments.
    fn base_moment(&self, s: f64) -> Result<Mat> {
        let d1 = self.pipe.lattice.dims[0];
        let n = self.pipe.n();
        if d1 == 0 {
            return Ok(Mat::zeros(0, n));
        }
        let x0 = self.x0();
        let sets = subsets();
        let row1 = self.pipe.row(sets[SUB1], s)?;
        let row23 = self.pipe.row(sets[SUB23], s)?;
        let row456 = self.pipe.row(sets[SUB456], s)?;
        let out = if s < x0 {
            let tau = -s.ln();
            let m1 = self.near_desc_at(SUB1, tau)?;
            let m23 = self.near_desc_at(SUB23, tau)?;
            let m456 = self.near_desc_at(SUB456, tau)?;
            // int_0^s (-K1 - K456) + int_s^{X} K23
            let to_s_1 = &self.full_near_1 - &m1;
            let to_s_456 = &self.full_near_456 - &m456;
            let far_end = self.far_minus.last().unwrap();
            let k23_total = m23 + sub_cols(far_end, self.pipe, &[1, 2, 3], &[2, 3]);
            -to_s_1 * row1 - to_s_456 * row456 + k23_total * row23
        } else {
            let (j, partial_m, partial_p) = self.far_at(s)?;
            let m_end = self.far_minus.last().unwrap();
            let p_at_s = self.far_plus[j].clone() + partial_p;
            let m_at_s = self.far_minus[j].clone() + partial_m;
            // int_0^s (-K456) + int_s^X (K1 + K23)
            let m456_total = &self.full_near_456 + sub_cols(&p_at_s, self.pipe, &[4, 5, 6], &[4, 5, 6]);
            let m1_rest = sub_cols(&(m_end - &m_at_s), self.pipe, &[1, 2, 3], &[1]);
            let m23_rest = sub_cols(&(m_end - &m_at_s), self.pipe, &[1, 2, 3], &[2, 3]);
            -m456_total * row456 + m1_rest * row1 + m23_rest * row23
        };
        Ok(out)
    }

    /// Descending near moment of one subset at depth tau, with a partial
    /// panel down to s = e^{-tau}.
    fn near_desc_at(&self, si: usize, tau: f64) -> Result<Mat> {
        let taus = &self.near_taus;
        let idx = ((tau - taus[0]) / 0.25).floor().max(0.0) as usize;
        let idx = idx.min(taus.len() - 1);
        let mut m = self.near_desc[si][idx].clone();
        // partial panel from taus[idx] to tau
        if tau > taus[idx] + 1e-13 {
            let w = &self.pipe.lattice.metric.w;
            let set = subsets()[si];
            for (t, wq) in quad::gauss_legendre(6, taus[idx], tau) {
                let x = (-t).exp();
                let c1 = self.pipe.col(PartSet::of(&[1]), x)?;
                let cs = self.pipe.col(set, x)?;
                m += (c1.transpose() * w * cs) * (wq * x);
            }
        }
        Ok(m)
    }

    /// Far cumulative moments at an arbitrary s: checkpoint index plus the
    /// partial-interval corrections for both groups.
    fn far_at(&self, s: f64) -> Result<(usize, Mat, Mat)> {
        let cps = &self.pipe.dichotomy.frames.checkpoints;
        let j = match cps.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(0) => 0,
            Err(k) => k - 1,
        }
        .min(cps.len() - 1);
        let w = &self.pipe.lattice.metric.w;
        let mut pm = Mat::zeros(self.far_minus[0].nrows(), self.far_minus[0].ncols());
        let mut pp = Mat::zeros(self.far_plus[0].nrows(), self.far_plus[0].ncols());
        if s > cps[j] + 1e-13 {
            for (x, wq) in quad::gauss_legendre(6, cps[j], s) {
                let c1 = self.pipe.col(PartSet::of(&[1]), x)?;
                let cm = self.pipe.col(PartSet::of(&[1, 2, 3]), x)?;
                pm += (c1.transpose() * w * cm) * wq;
                if pp.ncols() > 0 {
                    let cp = self.pipe.col(PartSet::of(&[4, 5, 6]), x)?;
                    pp += (c1.transpose() * w * cp) * wq;
                }
            }
        }
        Ok((j, pm, pp))
    }

    /// Rank-deficiency correction row M(s), in part-1 coordinates (d1 x n).
    pub fn eval_correction(&self, s: f64) -> Result<Mat> {
        let n = self.pipe.n();
        let Some(gram_inv) = &self.gram_inv else {
            return Ok(Mat::zeros(0, n));
        };
        let mut inner = self.base_moment(s)?;
        if dim_of(self.pipe, PartSet::of(&[5, 6])) > 0 {
            let row56 = self.pipe.row(PartSet::of(&[5, 6]), s)?;
            inner += &self.primitive_moment * row56;
        }
        Ok(-(gram_inv * inner))
    }

    /// Generalized kernel: base + kernel correction + primitive correction.
    pub fn eval_generalized(&self, x: f64, s: f64) -> Result<Mat> {
        let mut g = self.eval_base(x, s)?;
        if self.pipe.lattice.dims[0] > 0 {
            let col1 = self.pipe.col(PartSet::of(&[1]), x)?;
            g += col1 * self.eval_correction(s)?;
        }
        if dim_of(self.pipe, PartSet::of(&[5, 6])) > 0 {
            let weight = 1.0 - reg_lower_gamma(1.0 + self.beta, self.kappa * x)?;
            g += self.pipe.kernel(PartSet::of(&[5, 6]), x, s)? * weight;
        }
        Ok(g)
    }

    /// Sampled absolute integrability of the correction row: the integral of
    /// |M(s)| over both grids and the endpoint growth exponents.
    pub fn correction_integrability(&self) -> Result<(f64, f64, f64)> {
        if self.pipe.lattice.dims[0] == 0 {
            return Ok((0.0, 0.0, 0.0));
        }
        let x0 = self.x0();
        let mut total = 0.0;
        let mut first = Vec::new();
        let mut last = Vec::new();
        // near: log panels
        let mut tau = -x0.ln();
        for _ in 0..40 {
            for (t, wq) in quad::gauss_legendre(6, tau, tau + 0.25) {
                let s = (-t).exp();
                let m = self.eval_correction(s)?.norm();
                total += m * s * wq;
            }
            tau += 0.25;
        }
        // far: checkpoint panels (coarse)
        let cps = self.pipe.dichotomy.frames.checkpoints.clone();
        for j in (0..cps.len() - 1).step_by(2) {
            let hi = cps[(j + 2).min(cps.len() - 1)];
            for (s, wq) in quad::gauss_legendre(6, cps[j], hi) {
                let m = self.eval_correction(s)?.norm();
                total += m * wq;
                if s > cps[cps.len() - 1] - 6.0 {
                    last.push((s, m.max(1e-300).ln()));
                }
            }
        }
        for k in 0..4 {
            let s = x0 * 10f64.powi(-(k as i32) - 2);
            first.push((s.ln(), self.eval_correction(s)?.norm().max(1e-300).ln()));
        }
        let origin_exp = slope(&first);
        let tail_rate = slope(&last);
        Ok((total, origin_exp, tail_rate))
    }

    /// The five defining properties plus biorthonormality, sampled.
    pub fn verify(&self, probes: usize) -> Result<Vec<CheckOutcome>> {
        let mut checks = Vec::new();
        let x0 = self.x0();
        let x_inf = self.x_inf();
        let n = self.pipe.n();
        let tol = self.pipe.cfg.tol;
        let quad_limited = tol > 1e-3;

        // 1. differential identity by finite differences at probe pairs
        let mut worst = 0.0f64;
        let pairs: Vec<(f64, f64)> = {
            let mut v = Vec::new();
            let xs = [0.5 * x0, 1.5 * x0, 0.4 * x0 + 0.1 * x_inf];
            let ss = [0.7 * x0, 2.0 * x0, 0.2 * x0 + 0.15 * x_inf];
            for &x in &xs {
                for &s in &ss {
                    if (x - s).abs() > 0.05 * x0 {
                        v.push((x, s));
                    }
                }
            }
            v.truncate(probes.max(9));
            v
        };
        for &(x, s) in &pairs {
            let h = (1e-6f64).max(tol.sqrt()) * x * 0.01;
            let gp = self.eval_generalized(x + h, s)?;
            let gm = self.eval_generalized(x - h, s)?;
            let g0 = self.eval_generalized(x, s)?;
            let deriv = (gp - gm) / (2.0 * h);
            let c = &self.pipe.spec.a_mat / x + self.pipe.spec.eval_b(x);
            let rhs = if dim_of(self.pipe, PartSet::of(&[5, 6])) > 0 {
                let scalar = self.forcing_scalar(x)?;
                -(self.pipe.kernel(PartSet::of(&[5, 6]), x, s)? * scalar)
            } else {
                Mat::zeros(n, n)
            };
            worst = worst.max((deriv - c * g0 - rhs).norm());
        }
        if quad_limited {
            checks.push(CheckOutcome::skipped("differential_identity", worst, 1e-4));
        } else {
            checks.push(CheckOutcome::new("differential_identity", worst, 1e-4));
        }

        // 2. unit jump at the three standard probes
        let mut worst = 0.0f64;
        for &x in &[0.5 * x0, x0, (2.0 * x0).min(0.5 * (x0 + x_inf))] {
            let above = {
                // limit from x > s at equal arguments: the s <= x branch
                let mut g = self.pipe.kernel(PartSet::of(&[2, 3]), x, x)?;
                if x >= x0 {
                    g += self.pipe.kernel(PartSet::of(&[1]), x, x)?;
                }
                g
            };
            let below = {
                let mut g = -self.pipe.kernel(PartSet::of(&[4, 5, 6]), x, x)?;
                if x < x0 {
                    g -= self.pipe.kernel(PartSet::of(&[1]), x, x)?;
                }
                g
            };
            worst = worst.max((above - below - Mat::identity(n, n)).norm());
        }
        checks.push(CheckOutcome::new("unit_jump", worst, 1e-8));

        // 3. orthogonality of the generalized kernel to the solution kernel,
        // recomputed with a fresh quadrature in x
        let mut worst = 0.0f64;
        if self.pipe.lattice.dims[0] > 0 {
            let w = &self.pipe.lattice.metric.w;
            for &s in &[0.6 * x0, 1.7 * x0] {
                let corr = self.eval_correction(s)?;
                let row56 = if dim_of(self.pipe, PartSet::of(&[5, 6])) > 0 {
                    Some(self.pipe.row(PartSet::of(&[5, 6]), s)?)
                } else {
                    None
                };
                let gen_at = |x: f64| -> Result<Mat> {
                    let mut g = self.eval_base(x, s)?;
                    let col1 = self.pipe.col(PartSet::of(&[1]), x)?;
                    g += col1 * &corr;
                    if let Some(r56) = &row56 {
                        let weight = 1.0 - reg_lower_gamma(1.0 + self.beta, self.kappa * x)?;
                        g += self.pipe.col(PartSet::of(&[5, 6]), x)? * r56 * weight;
                    }
                    Ok(g)
                };
                let mut acc = Mat::zeros(self.pipe.lattice.dims[0], n);
                // panels split at the kernel jump x = s
                let tau_s = -s.ln();
                let mut tau = -x0.ln();
                for _ in 0..120 {
                    let mut segs = vec![(tau, tau + 0.25)];
                    if tau_s > tau && tau_s < tau + 0.25 {
                        segs = vec![(tau, tau_s), (tau_s, tau + 0.25)];
                    }
                    for (lo, hi) in segs {
                        for (t, wq) in quad::gauss_legendre(6, lo, hi) {
                            let x = (-t).exp();
                            let c1 = self.pipe.col(PartSet::of(&[1]), x)?;
                            acc += (c1.transpose() * w * gen_at(x)?) * (wq * x);
                        }
                    }
                    tau += 0.25;
                }
                // far panels, split at the jump as well
                let cps = self.pipe.dichotomy.frames.checkpoints.clone();
                for j in 0..cps.len() - 1 {
                    let mut segs = vec![(cps[j], cps[j + 1])];
                    if s > cps[j] && s < cps[j + 1] {
                        segs = vec![(cps[j], s), (s, cps[j + 1])];
                    }
                    for (lo, hi) in segs {
                        for (x, wq) in quad::gauss_legendre(6, lo, hi) {
                            let c1 = self.pipe.col(PartSet::of(&[1]), x)?;
                            acc += (c1.transpose() * w * gen_at(x)?) * wq;
                        }
                    }
                }
                worst = worst.max(acc.norm());
            }
        }
        if quad_limited {
            checks.push(CheckOutcome::skipped("kernel_orthogonality", worst, 1e-6));
        } else {
            checks.push(CheckOutcome::new("kernel_orthogonality", worst, 1e-6));
        }

        // 4. boundary values
        let x_min = 1e-4 * x0.min(1.0);
        let mut worst_zero = 0.0f64;
        let mut worst_inf = 0.0f64;
        for &s in &[0.5 * x0, x0, 2.0 * x0] {
            worst_zero = worst_zero.max(self.eval_generalized(x_min, s)?.norm());
            worst_inf = worst_inf.max(self.eval_generalized(x_inf, s)?.norm());
        }
        checks.push(CheckOutcome::new("boundary_zero", worst_zero, 1e-4));
        checks.push(CheckOutcome::new("boundary_infinity", worst_inf, 1e-6));

        // 5. boundedness of the solution operator on an admissible forcing
        let g_test = |s: f64| (-s).exp();
        let mut sup = 0.0f64;
        for &x in &[0.3 * x0, x0, 3.0 * x0, 0.5 * (x0 + x_inf)] {
            let tau_x = -x.ln();
            let mut acc = 0.0;
            let mut tau = -x0.ln();
            for _ in 0..40 {
                let mut segs = vec![(tau, tau + 0.25)];
                if tau_x > tau && tau_x < tau + 0.25 {
                    segs = vec![(tau, tau_x), (tau_x, tau + 0.25)];
                }
                for (lo, hi) in segs {
                    for (t, wq) in quad::gauss_legendre(6, lo, hi) {
                        let s = (-t).exp();
                        acc += self.eval_generalized(x, s)?.norm() * g_test(s) * s * wq;
                    }
                }
                tau += 0.25;
            }
            let cps = self.pipe.dichotomy.frames.checkpoints.clone();
            for j in (0..cps.len() - 1).step_by(2) {
                let hi_cp = cps[(j + 2).min(cps.len() - 1)];
                let mut segs = vec![(cps[j], hi_cp)];
                if x > cps[j] && x < hi_cp {
                    segs = vec![(cps[j], x), (x, hi_cp)];
                }
                for (lo, hi) in segs {
                    for (s, wq) in quad::gauss_legendre(6, lo, hi) {
                        acc += self.eval_generalized(x, s)?.norm() * g_test(s) * wq;
                    }
                }
            }
            sup = sup.max(acc);
        }
        checks.push(CheckOutcome::new("boundedness_sup", sup, 1e3));

        // 6. biorthonormality of the forcing profile against the cokernel rows
        let d56 = dim_of(self.pipe, PartSet::of(&[5, 6]));
        if d56 > 0 {
            let mut acc = Mat::zeros(d56, d56);
            let mut tau = -x0.ln();
            for _ in 0..160 {
                for (t, wq) in quad::gauss_legendre(6, tau, tau + 0.25) {
                    let x = (-t).exp();
                    let row = self.pipe.row(PartSet::of(&[5, 6]), x)?;
                    let col = self.pipe.col(PartSet::of(&[5, 6]), x)?;
                    acc += (row * col) * (self.forcing_scalar(x)? * wq * x);
                }
                tau += 0.25;
            }
            let cps = self.pipe.dichotomy.frames.checkpoints.clone();
            for j in 0..cps.len() - 1 {
                for (x, wq) in quad::gauss_legendre(6, cps[j], cps[j + 1]) {
                    let row = self.pipe.row(PartSet::of(&[5, 6]), x)?;
                    let col = self.pipe.col(PartSet::of(&[5, 6]), x)?;
                    acc += (row * col) * (self.forcing_scalar(x)? * wq);
                }
            }
            // analytic tail of the gamma envelope beyond the truncation
            let defect = (acc - Mat::identity(d56, d56)).norm();
            checks.push(CheckOutcome::new("biorthonormality", defect, 1e-8));
        } else {
            checks.push(CheckOutcome::new("biorthonormality", 0.0, 1e-8));
        }

        Ok(checks)
    }
}

fn sub_cols(m: &Mat, pipe: &Pipeline, group: &[usize], wanted: &[usize]) -> Mat {
    // select the columns of the group-ordered moment belonging to `wanted`
    let mut cols: Vec<usize> = Vec::new();
    let mut off = 0;
    for &p in group {
        let d = pipe.lattice.parts[p - 1].dim();
        if wanted.contains(&p) {
            cols.extend(off..off + d);
        }
        off += d;
    }
    let mut out = Mat::zeros(m.nrows(), cols.len());
    for (j, &c) in cols.iter().enumerate() {
        out.set_column(j, &m.column(c));
    }
    out
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::TermSum;
    use crate::kernels::build_pipeline;
    use crate::linalg::Vec64;
    use crate::problem::{self, ProblemSpec, SolverConfig};
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

    fn p1_pipe() -> Pipeline {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let ystar = vec![TermSum::term(1.0, 2, 1.0), TermSum::term(1.0, 1, 1.0)];
        let spec = problem::manufacture(&a, &diag_b(&[-1.0, -1.0]), &ystar).unwrap().0;
        let cfg = SolverConfig { x0: Some(1.0), ..SolverConfig::default() };
        build_pipeline(&spec, &cfg, None).unwrap()
    }

    fn p2_pipe(kappa: f64, beta: f64) -> Pipeline {
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let spec = ProblemSpec::new(
            a,
            Vec64::zeros(2),
            diag_b(&[1.0, -1.0]),
            vec![TermSum::zero(), TermSum::zero()],
        )
        .unwrap();
        let cfg = SolverConfig {
            x0: Some(1.0),
            kappa: Some(kappa),
            beta: Some(beta),
            ..SolverConfig::default()
        };
        build_pipeline(&spec, &cfg, None).unwrap()
    }

    #[test]
    fn gram_regression_p1() {
        let pipe = p1_pipe();
        let green = build_green(&pipe).unwrap();
        // int_0^inf x^4 e^{-2(x-1)} dx = 0.75 e^2 for the unit-at-anchor frame
        assert_eq!(green.gram.nrows(), 1);
        assert_relative_eq!(green.gram[(0, 0)], 0.75 * (2.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn forcing_and_primitive_values_p2() {
        let pipe = p2_pipe(2.0, 1.0);
        let green = build_green(&pipe).unwrap();
        // F(1) = kappa^2 / (Gamma(2) e^2) Y(1;1) P6 = 4 e^{-2} P6, P6 = diag(1,0)
        let f1 = green.eval_forcing(1.0).unwrap();
        assert_relative_eq!(f1[(0, 0)], 4.0 * (-2.0f64).exp(), epsilon = 1e-7);
        assert!(f1[(1, 1)].abs() < 1e-9);
        // N(1) = (1 - P(2, 2)) P6 = 3 e^{-2} P6
        let n1 = green.eval_primitive(1.0).unwrap();
        assert_relative_eq!(n1[(0, 0)], 3.0 * (-2.0f64).exp(), epsilon = 1e-7);
        // F vanishes at both ends
        assert!(green.eval_forcing(1e-8).unwrap().norm() < 1e-7);
        assert!(green.eval_forcing(pipe.x_inf).unwrap().norm() < 1e-6);
    }

    #[test]
    fn trivial_corrections_without_cokernel() {
        let pipe = p1_pipe();
        let green = build_green(&pipe).unwrap();
        assert_relative_eq!(green.eval_forcing(0.7).unwrap().norm(), 0.0);
        assert_relative_eq!(green.eval_primitive(0.7).unwrap().norm(), 0.0);
    }

    #[test]
    fn correction_matches_closed_form_p1() {
        // With Y(x;1) = diag(x^2 e^{1-x}, x^{-1} e^{1-x}) the correction row is
        //   s < 1:  e^{1+s} P(5, 2s) / (s^2 e^2)
        //   s >= 1: -e^{1+s} (1 - P(5, 2s)) / (s^2 e^2)
        // in the first entry and zero in the second.
        let pipe = p1_pipe();
        let green = build_green(&pipe).unwrap();
        for &s in &[0.5, 0.8, 1.5, 3.0] {
            let m = green.eval_correction(s).unwrap();
            let p5 = reg_lower_gamma(5.0, 2.0 * s).unwrap();
            let expect = if s < 1.0 {
                (1.0 + s).exp() * p5 / (s * s * (2.0f64).exp())
            } else {
                -(1.0 + s).exp() * (1.0 - p5) / (s * s * (2.0f64).exp())
            };
            assert_relative_eq!(m[(0, 0)], expect, epsilon = 2e-6, max_relative = 2e-6);
            assert!(m[(0, 1)].abs() < 1e-8, "second entry {}", m[(0, 1)]);
        }
        // absolute integrability of the correction
        let (total, origin_exp, tail_rate) = green.correction_integrability().unwrap();
        assert!(total.is_finite() && total > 0.0);
        assert!(origin_exp > 1.0, "origin exponent {origin_exp}");
        assert!(tail_rate < -0.5, "tail rate {tail_rate}");
    }

    #[test]
    fn battery_p1() {
        let pipe = p1_pipe();
        let green = build_green(&pipe).unwrap();
        let checks = green.verify(9).unwrap();
        for c in &checks {
            assert!(c.passed(), "{}: {} > {}", c.name, c.value, c.threshold);
        }
    }

    #[test]
    fn battery_p2() {
        let pipe = p2_pipe(2.0, 1.0);
        let green = build_green(&pipe).unwrap();
        let checks = green.verify(9).unwrap();
        for c in &checks {
            assert!(c.passed(), "{}: {} > {}", c.name, c.value, c.threshold);
        }
    }

    #[test]
    fn base_kernel_jump_in_value_p1() {
        let pipe = p1_pipe();
        let green = build_green(&pipe).unwrap();
        // G at (0.5, 0.8) sits in the near D-minus region: -K1
        let g = green.eval_base(0.5, 0.8).unwrap();
        let expect = -(0.5f64 / 0.8).powi(2) * (0.3f64).exp();
        assert_relative_eq!(g[(0, 0)], expect, epsilon = 1e-7);
        // zero block for the decaying slow mode on the other side
        assert!(g[(1, 1)].abs() < 1e-9);
    }
}
