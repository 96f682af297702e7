//! Matrix exponential by scaling and squaring with a degree-13 Pade
//! approximant, and real matrix powers x^A = exp(ln(x) A).

use super::Mat;
use crate::error::{Error, Result};

// Pade order-13 numerator coefficients (denominator uses alternating signs).
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// theta_13 from the standard backward-error analysis of the order-13 scheme.
const THETA_13: f64 = 5.371920351148152;

/// exp(A) for a square matrix.
///
/// Relative accuracy is at the 1e-13 level for `|A| <= 50`; inputs whose
/// one-norm would push the squaring phase past the floating range are
/// rejected with a range error.
pub fn mat_exp(a: &Mat) -> Result<Mat> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square input, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::Domain("matrix exponential of non-finite entries".into()));
    }
    let norm = one_norm(a);
    if norm > 600.0 {
        return Err(Error::Range(format!(
            "matrix exponential overflow guard: one-norm {norm:.3e} exceeds 600"
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }

    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a_scaled = a * 2f64.powi(-s);

    let a2 = &a_scaled * &a_scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let id = Mat::identity(n, n);

    // u = A (a6 (b13 a6 + b11 a4 + b9 a2) + b7 a6 + b5 a4 + b3 a2 + b1 I)
    let u_inner = &a6 * (&a6 * B13[13] + &a4 * B13[11] + &a2 * B13[9])
        + &a6 * B13[7]
        + &a4 * B13[5]
        + &a2 * B13[3]
        + &id * B13[1];
    let u = &a_scaled * u_inner;
    // v = a6 (b12 a6 + b10 a4 + b8 a2) + b6 a6 + b4 a4 + b2 a2 + b0 I
    let v = &a6 * (&a6 * B13[12] + &a4 * B13[10] + &a2 * B13[8])
        + &a6 * B13[6]
        + &a4 * B13[4]
        + &a2 * B13[2]
        + &id * B13[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .ok_or_else(|| Error::Internal("Pade denominator is singular".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn one_norm(a: &Mat) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// x^A = exp(ln(x) A) for x > 0.
pub fn mat_power(a: &Mat, x: f64) -> Result<Mat> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("matrix power needs a square input".into()));
    }
    if !(x > 0.0) {
        return Err(Error::Domain(format!("matrix power requires x > 0, got {x}")));
    }
    let lx = x.ln();
    if lx == 0.0 {
        return Ok(Mat::identity(a.nrows(), a.ncols()));
    }
    // guard: an eigenvalue lambda turns into x^lambda = e^{lambda ln x}
    for lambda in a.complex_eigenvalues().iter() {
        let exponent = lambda.re * lx;
        if exponent > 700.0 {
            return Err(Error::Range(format!(
                "matrix power overflow: eigenvalue {} at x = {x} gives exponent {exponent:.1}",
                lambda.re
            )));
        }
    }
    mat_exp(&(a * lx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exp_of_zero_is_identity() {
        let z = Mat::zeros(3, 3);
        let e = mat_exp(&z).unwrap();
        assert_relative_eq!((e - Mat::identity(3, 3)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn exp_of_diagonal() {
        let d = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let e = mat_exp(&d).unwrap();
        assert_relative_eq!(e[(0, 0)], 1f64.exp(), max_relative = 1e-14);
        assert_relative_eq!(e[(1, 1)], (-1f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(e[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exp_of_nilpotent() {
        let n = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = mat_exp(&n).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_relative_eq!((e - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn exp_large_norm_accuracy() {
        // diag(30, -30): relies on scaling-squaring staying accurate
        let d = Mat::from_row_slice(2, 2, &[30.0, 0.0, 0.0, -30.0]);
        let e = mat_exp(&d).unwrap();
        assert_relative_eq!(e[(0, 0)], 30f64.exp(), max_relative = 1e-12);
        assert_relative_eq!(e[(1, 1)], (-30f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn exp_rejects_nonsquare_and_huge() {
        let m = Mat::zeros(2, 3);
        assert!(matches!(mat_exp(&m), Err(Error::Dimension(_))));
        let big = Mat::identity(2, 2) * 1e4;
        assert!(matches!(mat_exp(&big), Err(Error::Range(_))));
    }

    #[test]
    fn power_diagonal() {
        let a = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let p = mat_power(&a, 0.5).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.25, max_relative = 1e-13);
        assert_relative_eq!(p[(1, 1)], 2.0, max_relative = 1e-13);
        let id = mat_power(&a, 1.0).unwrap();
        assert_relative_eq!((id - Mat::identity(2, 2)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn power_nilpotent_at_e() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let p = mat_power(&a, std::f64::consts::E).unwrap();
        let expected = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_relative_eq!((p - expected).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn power_domain_and_range_errors() {
        let a = Mat::identity(2, 2);
        assert!(matches!(mat_power(&a, 0.0), Err(Error::Domain(_))));
        assert!(matches!(mat_power(&a, -1.0), Err(Error::Domain(_))));
        let b = Mat::from_row_slice(1, 1, &[-800.0]);
        assert!(matches!(mat_power(&b, 1e-3), Err(Error::Range(_))));
    }

    #[test]
    fn power_semigroup_property() {
        let a = Mat::from_row_slice(2, 2, &[0.3, 1.1, -0.4, 0.8]);
        let x = 0.37;
        let y = 4.1;
        let lhs = mat_power(&a, x).unwrap() * mat_power(&a, y).unwrap();
        let rhs = mat_power(&a, x * y).unwrap();
        assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-11);
    }
}
