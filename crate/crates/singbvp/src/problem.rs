//! Problem data: the system y' = (A/x + B(x)) y + a/x + f(x) on [0, inf),
//! its JSON file format, validation, and the manufactured-solution generator.

use crate::error::{Error, Result};
use crate::grammar::{Term, TermSum};
use crate::linalg::{self, Mat, Vec64};
use serde::{Deserialize, Serialize};

/// Validated problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub n: usize,
    /// Residue matrix of the pole at the origin.
    pub a_mat: Mat,
    /// Constant forcing of the singular part, a/x.
    pub a_vec: Vec64,
    /// Bounded coefficient matrix B(x), row-major entries in the term grammar.
    pub b: Vec<Vec<TermSum>>,
    /// Regular forcing f(x).
    pub f: Vec<TermSum>,
}

impl ProblemSpec {
    pub fn new(a_mat: Mat, a_vec: Vec64, b: Vec<Vec<TermSum>>, f: Vec<TermSum>) -> Result<Self> {
        let n = a_mat.nrows();
        let spec = Self { n, a_mat, a_vec, b, f };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Parse("dimension must be positive".into()));
        }
        if n > 16 {
            return Err(Error::Parse(format!(
                "dimension {n} exceeds the supported envelope (16)"
            )));
        }
        if self.a_mat.nrows() != n || self.a_mat.ncols() != n {
            return Err(Error::Parse("matrix A must be n x n".into()));
        }
        if !self.a_mat.iter().all(|x| x.is_finite()) {
            return Err(Error::Parse("matrix A has non-finite entries".into()));
        }
        if self.a_vec.len() != n {
            return Err(Error::Parse("vector a must have length n".into()));
        }
        if self.b.len() != n || self.b.iter().any(|row| row.len() != n) {
            return Err(Error::Parse("coefficient matrix B must be n x n".into()));
        }
        if self.f.len() != n {
            return Err(Error::Parse("forcing f must have length n".into()));
        }
        for (i, row) in self.b.iter().enumerate() {
            for (j, ts) in row.iter().enumerate() {
                ts.validate()
                    .map_err(|e| Error::Parse(format!("B[{i}][{j}]: {e}")))?;
            }
        }
        for (i, ts) in self.f.iter().enumerate() {
            ts.validate().map_err(|e| Error::Parse(format!("f[{i}]: {e}")))?;
        }
        Ok(())
    }

    /// Check the main-problem hypothesis that f vanishes at infinity.
    pub fn validate_f_vanishes(&self) -> Result<()> {
        for (i, ts) in self.f.iter().enumerate() {
            if !ts.vanishes_at_infinity() {
                return Err(Error::Parse(format!(
                    "f[{i}] does not vanish at infinity (limit {})",
                    ts.limit_at_infinity()
                )));
            }
        }
        Ok(())
    }

    pub fn eval_b(&self, x: f64) -> Mat {
        let n = self.n;
        Mat::from_fn(n, n, |i, j| self.b[i][j].eval(x))
    }

    pub fn eval_f(&self, x: f64) -> Vec64 {
        Vec64::from_fn(self.n, |i, _| self.f[i].eval(x))
    }

    /// Entrywise limit of B at infinity.
    pub fn b_limit_at_infinity(&self) -> Mat {
        Mat::from_fn(self.n, self.n, |i, j| self.b[i][j].limit_at_infinity())
    }

    /// Sampled upper bound for sup_x |B(x)| (Frobenius norm; conservative).
    pub fn sup_b_norm(&self) -> f64 {
        let mut m = self.eval_b(0.0).norm().max(self.b_limit_at_infinity().norm());
        let mut x = 1e-6;
        while x < 200.0 {
            m = m.max(self.eval_b(x).norm());
            x *= 1.07;
        }
        1.05 * m
    }

    /// Sampled upper bound for sup_x |f(x)|.
    pub fn sup_f_norm(&self) -> f64 {
        let mut m = self.eval_f(0.0).norm();
        let mut x = 1e-6;
        while x < 200.0 {
            m = m.max(self.eval_f(x).norm());
            x *= 1.07;
        }
        1.05 * m
    }
}

/// Gap of the residue spectrum to the line Re = 1; errors when an eigenvalue
/// sits on it. The returned gap is the decay exponent margin used in the
/// near-origin estimates.
pub fn validate_condition_a(a_mat: &Mat, tol: f64) -> Result<f64> {
    let mut alpha = f64::INFINITY;
    for l in a_mat.complex_eigenvalues().iter() {
        let gap = (l.re - 1.0).abs();
        if gap <= tol {
            return Err(Error::ConditionA { re: l.re, im: l.im, tol });
        }
        alpha = alpha.min(gap);
    }
    Ok(alpha)
}

/// The unique eta in ran A^T with A eta + a = 0; errors when a is outside
/// the range of A (the range condition on the constant forcing fails).
pub fn validate_condition_c(a_mat: &Mat, a_vec: &Vec64, tol: f64) -> Result<Vec64> {
    linalg::min_norm_solve(a_mat, &(-a_vec), tol).map_err(|e| match e {
        Error::Consistency { residual } => Error::ConditionC { residual },
        other => other,
    })
}

/// Solver configuration; `None` means the value is derived automatically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Anchor point separating the near-origin and dichotomy regions.
    pub x0: Option<f64>,
    /// Truncation point standing in for +infinity.
    pub x_inf: Option<f64>,
    /// Quadrature / ODE tolerance.
    pub tol: f64,
    /// Exponential weight of the biorthonormal forcing profile (must exceed
    /// the dichotomy rate).
    pub kappa: Option<f64>,
    /// Power weight of the forcing profile (all Re eigenvalues of A must
    /// exceed -beta).
    pub beta: Option<f64>,
    /// Eigenvalue / rank decision tolerance.
    pub split_tol: f64,
    /// Escalate quality warnings to hard errors.
    pub strict: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            x0: None,
            x_inf: None,
            tol: 1e-8,
            kappa: None,
            beta: None,
            split_tol: 1e-8,
            strict: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol <= 1e-2) {
            return Err(Error::Parse(format!(
                "tolerance must lie in (0, 1e-2], got {}",
                self.tol
            )));
        }
        if let Some(x0) = self.x0 {
            if !(x0 > 0.0) {
                return Err(Error::Parse("x0 must be positive".into()));
            }
        }
        if let (Some(x0), Some(xi)) = (self.x0, self.x_inf) {
            if !(x0 < xi) {
                return Err(Error::Parse("x0 must be below the truncation point".into()));
            }
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) {
                return Err(Error::Parse("kappa must be positive".into()));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::Parse("beta must be positive".into()));
            }
        }
        if !(self.split_tol > 0.0) {
            return Err(Error::Parse("split tolerance must be positive".into()));
        }
        Ok(())
    }

    /// kappa default: comfortably above the dichotomy rate.
    pub fn kappa_for(&self, gamma: f64) -> f64 {
        self.kappa.unwrap_or(2.0 * gamma + 1.0)
    }

    /// beta default: all Re eigenvalues of A exceed -beta with 10% margin.
    pub fn beta_for(&self, a_mat: &Mat) -> f64 {
        self.beta.unwrap_or_else(|| {
            let min_re = a_mat
                .complex_eigenvalues()
                .iter()
                .map(|l| l.re)
                .fold(f64::INFINITY, f64::min);
            (1.1 * (-min_re).max(0.0) + 0.1).max(1.0)
        })
    }
}

// ---------------------------------------------------------------------------
// file format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    n: usize,
    #[serde(rename = "A")]
    a_mat: Vec<Vec<f64>>,
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<Vec<Vec<Term>>>,
    f: Vec<Vec<Term>>,
}

/// Parse and validate a problem file.
pub fn parse_problem(text: &str) -> Result<ProblemSpec> {
    let file: ProblemFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("problem file: {e}")))?;
    let n = file.n;
    if n == 0 {
        return Err(Error::Parse("dimension must be positive".into()));
    }
    if file.a_mat.len() != n || file.a_mat.iter().any(|r| r.len() != n) {
        return Err(Error::Parse("field A must be an n x n array".into()));
    }
    let a_mat = Mat::from_fn(n, n, |i, j| file.a_mat[i][j]);
    if file.a.len() != n {
        return Err(Error::Parse("field a must have length n".into()));
    }
    let a_vec = Vec64::from_column_slice(&file.a);
    if file.b.len() != n || file.b.iter().any(|r| r.len() != n) {
        return Err(Error::Parse("field B must be an n x n array of term lists".into()));
    }
    let b: Vec<Vec<TermSum>> = file
        .b
        .into_iter()
        .map(|row| row.into_iter().map(TermSum::from_terms).collect())
        .collect();
    if file.f.len() != n {
        return Err(Error::Parse("field f must have length n".into()));
    }
    let f: Vec<TermSum> = file.f.into_iter().map(TermSum::from_terms).collect();
    ProblemSpec::new(a_mat, a_vec, b, f)
}

/// Serialize a problem to the canonical file format.
pub fn serialize_problem(spec: &ProblemSpec) -> String {
    let file = ProblemFile {
        n: spec.n,
        a_mat: (0..spec.n)
            .map(|i| (0..spec.n).map(|j| spec.a_mat[(i, j)]).collect())
            .collect(),
        a: spec.a_vec.iter().copied().collect(),
        b: spec
            .b
            .iter()
            .map(|row| row.iter().map(|ts| ts.terms.clone()).collect())
            .collect(),
        f: spec.f.iter().map(|ts| ts.terms.clone()).collect(),
    };
    serde_json::to_string_pretty(&file).expect("problem file serialization cannot fail")
}

// ---------------------------------------------------------------------------
// manufactured solutions

/// Build a problem whose main boundary value problem has `ystar` as an exact
/// solution: a := -A ystar(0) and f := ystar' - B ystar - (A ystar + a)/x.
///
/// Requires every `ystar` term to have p >= 0 and mu > 0 so that the data
/// stays in the grammar and the solution vanishes at infinity. Returns the
/// problem together with the kernel component of ystar(0) (the free boundary
/// parameter recovered by the solver).
pub fn manufacture(
    a_mat: &Mat,
    b: &[Vec<TermSum>],
    ystar: &[TermSum],
) -> Result<(ProblemSpec, Vec64)> {
    let n = a_mat.nrows();
    if ystar.len() != n || b.len() != n {
        return Err(Error::Dimension("manufacture: inconsistent dimensions".into()));
    }
    for (i, ts) in ystar.iter().enumerate() {
        for t in &ts.terms {
            if t.p < 0 || t.mu <= 0.0 {
                return Err(Error::Parse(format!(
                    "ystar[{i}] must have p >= 0 and mu > 0 in every term"
                )));
            }
        }
    }
    let ystar0 = Vec64::from_fn(n, |i, _| ystar[i].eval(0.0));
    let a_vec = -(a_mat * &ystar0);

    let mut f = Vec::with_capacity(n);
    for i in 0..n {
        // (A ystar)_i + a_i, then divided by x inside the grammar
        let mut h = TermSum::constant(a_vec[i]);
        for j in 0..n {
            h = h.add(&ystar[j].scale(a_mat[(i, j)]));
        }
        let h_over_x = h.div_x()?;
        // B ystar
        let mut by = TermSum::zero();
        for j in 0..n {
            by = by.add(&b[i][j].mul(&ystar[j])?);
        }
        let fi = ystar[i]
            .derivative()?
            .add(&by.scale(-1.0))
            .add(&h_over_x.scale(-1.0));
        f.push(fi);
    }
    let spec = ProblemSpec::new(a_mat.clone(), a_vec, b.to_vec(), f)?;
    // kernel component of the boundary value
    let null = linalg::null_space(a_mat, 1e-10);
    let zeta = if null.ncols() == 0 {
        Vec64::zeros(n)
    } else {
        let basis = linalg::orthonormalize(&null, None, 1e-12);
        &basis * (basis.transpose() * &ystar0)
    };
    Ok((spec, zeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn minus_identity_b(n: usize) -> Vec<Vec<TermSum>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { TermSum::constant(-1.0) } else { TermSum::zero() })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn manufacture_p1() {
        // A = diag(2, -1), B = -E, ystar = (x^2 e^{-x}, x e^{-x})
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let ystar = vec![TermSum::term(1.0, 2, 1.0), TermSum::term(1.0, 1, 1.0)];
        let (spec, zeta) = manufacture(&a, &minus_identity_b(2), &ystar).unwrap();
        assert_relative_eq!(spec.a_vec.norm(), 0.0, epsilon = 1e-14);
        assert!(spec.f[0].is_zero(), "f1 should vanish, got {:?}", spec.f[0]);
        // f2 = 2 e^{-x}
        assert_eq!(spec.f[1].terms.len(), 1);
        assert_relative_eq!(spec.f[1].terms[0].c, 2.0, epsilon = 1e-14);
        assert_eq!(spec.f[1].terms[0].p, 0);
        assert_relative_eq!(spec.f[1].terms[0].mu, 1.0, epsilon = 1e-14);
        assert_relative_eq!(zeta.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn manufacture_p3() {
        // A = diag(0, 2), B = -E, ystar = (e^{-x}, -e^{-x})
        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let ystar = vec![TermSum::term(1.0, 0, 1.0), TermSum::term(-1.0, 0, 1.0)];
        let (spec, zeta) = manufacture(&a, &minus_identity_b(2), &ystar).unwrap();
        assert_relative_eq!(spec.a_vec[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(spec.a_vec[1], 2.0, epsilon = 1e-14);
        assert!(spec.f[0].is_zero());
        // f2 = 2 x^{-1} e^{-x} - 2 x^{-1}
        let f2 = &spec.f[1];
        f2.validate().unwrap();
        assert_relative_eq!(f2.eval(0.0), -2.0, epsilon = 1e-12);
        let x = 0.7;
        assert_relative_eq!(
            f2.eval(x),
            2.0 * (-x).exp() / x - 2.0 / x,
            max_relative = 1e-12
        );
        assert!(f2.vanishes_at_infinity());
        // kernel of A is span e1; ystar(0) = (1, -1)
        assert_relative_eq!(zeta[0], 1.0, epsilon = 1e-13);
        assert_relative_eq!(zeta[1], 0.0, epsilon = 1e-13);
    }

    #[test]
    fn manufacture_zero() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let ystar = vec![TermSum::zero(), TermSum::zero()];
        let (spec, zeta) = manufacture(&a, &minus_identity_b(2), &ystar).unwrap();
        assert_relative_eq!(spec.a_vec.norm(), 0.0);
        assert!(spec.f.iter().all(|ts| ts.is_zero()));
        assert_relative_eq!(zeta.norm(), 0.0);
    }

    #[test]
    fn roundtrip_parse_serialize() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let ystar = vec![TermSum::term(1.0, 0, 1.0), TermSum::term(-1.0, 0, 1.0)];
        let (spec, _) = manufacture(&a, &minus_identity_b(2), &ystar).unwrap();
        let text = serialize_problem(&spec);
        let back = parse_problem(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn parse_rejects_unknown_fields_and_bad_terms() {
        let bad = r#"{"n":1,"A":[[0.0]],"a":[0.0],"B":[[[]]],"f":[[]],"extra":1}"#;
        assert!(matches!(parse_problem(bad), Err(Error::Parse(_))));

        // a lone p = -1 term cannot be continuous at the origin
        let bad = r#"{"n":1,"A":[[0.0]],"a":[0.0],"B":[[[]]],"f":[[{"c":1.0,"p":-1,"mu":1.0}]]}"#;
        let err = parse_problem(bad).unwrap_err();
        assert!(err.to_string().contains("f[0]"), "{err}");
    }

    #[test]
    fn condition_a_gap() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        assert_relative_eq!(validate_condition_a(&a, 1e-8).unwrap(), 1.0);
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(validate_condition_a(&a, 1e-8), Err(Error::ConditionA { .. })));
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        assert_relative_eq!(validate_condition_a(&a, 1e-8).unwrap(), 0.5);
    }

    #[test]
    fn condition_c_solutions() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let avec = Vec64::from_column_slice(&[0.0, 2.0]);
        let eta = validate_condition_c(&a, &avec, 1e-10).unwrap();
        assert_relative_eq!(eta[0], 0.0, epsilon = 1e-13);
        assert_relative_eq!(eta[1], -1.0, epsilon = 1e-13);

        let zero = Vec64::zeros(2);
        let eta = validate_condition_c(&a, &zero, 1e-10).unwrap();
        assert_relative_eq!(eta.norm(), 0.0, epsilon = 1e-13);

        let bad = Vec64::from_column_slice(&[1.0, 0.0]);
        assert!(matches!(
            validate_condition_c(&a, &bad, 1e-10),
            Err(Error::ConditionC { .. })
        ));
    }

    #[test]
    fn f_limit_with_singular_pair_accepted() {
        // f entry 2 x^{-1} e^{-x} - 2 x^{-1} is accepted with limit -2 at 0
        let text = r#"{"n":1,"A":[[0.0]],"a":[0.0],"B":[[[]]],
            "f":[[{"c":2.0,"p":-1,"mu":1.0},{"c":-2.0,"p":-1,"mu":0.0}]]}"#;
        let spec = parse_problem(text).unwrap();
        assert_relative_eq!(spec.f[0].eval(0.0), -2.0, epsilon = 1e-12);
        spec.validate_f_vanishes().unwrap();
    }
}
