//! Closed coefficient grammar: finite sums of terms c * x^p * e^{-mu x} with
//! integer p >= -1 and mu >= 0.
//!
//! The grammar is closed under addition, products, division by x (shifting
//! p down to the -1 floor), and d/dx for p >= 0, which is exactly what the
//! singular system, the manufactured oracles, and the residual checks need.
//! Limits at 0 and at infinity are decidable term-by-term.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One grammar term, valued `c * x^p * e^{-mu x}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub c: f64,
    pub p: i32,
    pub mu: f64,
}

/// A finite sum of terms; one scalar coefficient entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermSum {
    pub terms: Vec<Term>,
}

impl TermSum {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        if c == 0.0 {
            return Self::zero();
        }
        Self { terms: vec![Term { c, p: 0, mu: 0.0 }] }
    }

    pub fn term(c: f64, p: i32, mu: f64) -> Self {
        Self { terms: vec![Term { c, p, mu }] }.simplified()
    }

    pub fn from_terms(terms: Vec<Term>) -> Self {
        Self { terms }.simplified()
    }

    /// Merge terms with identical (p, mu) keys and drop exact zeros.
    pub fn simplified(&self) -> Self {
        let mut merged: Vec<Term> = Vec::new();
        for t in &self.terms {
            if let Some(m) = merged
                .iter_mut()
                .find(|m| m.p == t.p && (m.mu - t.mu).abs() <= 1e-14 * (1.0 + m.mu.abs()))
            {
                m.c += t.c;
            } else {
                merged.push(*t);
            }
        }
        let scale = merged.iter().map(|t| t.c.abs()).fold(0.0f64, f64::max);
        merged.retain(|t| t.c.abs() > 1e-15 * scale.max(1e-300));
        merged.sort_by(|a, b| (a.p, ordered(a.mu)).partial_cmp(&(b.p, ordered(b.mu))).unwrap());
        Self { terms: merged }
    }

    /// Structural validation: p >= -1, mu >= 0, finite coefficients, the
    /// p = -1 coefficients cancel (continuity at 0), and every mu = 0 term
    /// has p <= 0 (boundedness on the half-line).
    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if t.p < -1 {
                return Err(Error::Parse(format!("term power {} below -1", t.p)));
            }
            if t.mu < 0.0 {
                return Err(Error::Parse(format!("negative decay rate {}", t.mu)));
            }
            if !t.c.is_finite() || !t.mu.is_finite() {
                return Err(Error::Parse("non-finite term coefficient".into()));
            }
            if t.mu == 0.0 && t.p > 0 {
                return Err(Error::Parse(format!(
                    "term x^{} without decay is unbounded on the half-line",
                    t.p
                )));
            }
        }
        let c_sing: f64 = self.terms.iter().filter(|t| t.p == -1).map(|t| t.c).sum();
        let c_scale: f64 = self
            .terms
            .iter()
            .filter(|t| t.p == -1)
            .map(|t| t.c.abs())
            .sum::<f64>()
            .max(1e-300);
        if self.terms.iter().any(|t| t.p == -1) && c_sing.abs() > 1e-12 * c_scale {
            return Err(Error::Parse(format!(
                "singular coefficients do not cancel at 0 (sum {c_sing:e}); the entry has no finite limit"
            )));
        }
        Ok(())
    }

    /// Value at x >= 0; at x = 0 the analytic limit.
    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            if t.p == -1 {
                continue;
            }
            acc += t.c * powi(x, t.p) * (-t.mu * x).exp();
        }
        // p = -1 group: sum c e^{-mu x} / x = sum c (e^{-mu x} - 1) / x
        // because the plain coefficients cancel; expm1 keeps this stable for
        // every x, including the x -> 0 limit.
        if x == 0.0 {
            acc += self.terms.iter().filter(|t| t.p == -1).map(|t| -t.c * t.mu).sum::<f64>();
        } else {
            acc += self
                .terms
                .iter()
                .filter(|t| t.p == -1)
                .map(|t| t.c * (-t.mu * x).exp_m1())
                .sum::<f64>()
                / x;
        }
        acc
    }

    /// Limit at +infinity (exists for every valid sum).
    pub fn limit_at_infinity(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.mu == 0.0 && t.p == 0)
            .map(|t| t.c)
            .sum()
    }

    /// True when the entry tends to 0 at infinity.
    pub fn vanishes_at_infinity(&self) -> bool {
        self.limit_at_infinity() == 0.0
    }

    /// Exact symbolic derivative; requires every power to be >= 0.
    pub fn derivative(&self) -> Result<TermSum> {
        let mut out = Vec::new();
        for t in &self.terms {
            if t.p < 0 {
                return Err(Error::Domain(
                    "derivative leaves the grammar for terms with power -1".into(),
                ));
            }
            if t.p > 0 {
                out.push(Term { c: t.c * t.p as f64, p: t.p - 1, mu: t.mu });
            }
            if t.mu != 0.0 {
                out.push(Term { c: -t.c * t.mu, p: t.p, mu: t.mu });
            }
        }
        Ok(TermSum::from_terms(out))
    }

    /// Division by x inside the grammar; every power must stay >= -1.
    pub fn div_x(&self) -> Result<TermSum> {
        let mut out = Vec::new();
        for t in &self.terms {
            if t.p - 1 < -1 {
                return Err(Error::Domain("division by x leaves the grammar".into()));
            }
            out.push(Term { c: t.c, p: t.p - 1, mu: t.mu });
        }
        Ok(TermSum::from_terms(out))
    }

    pub fn add(&self, other: &TermSum) -> TermSum {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        TermSum::from_terms(terms)
    }

    pub fn scale(&self, c: f64) -> TermSum {
        TermSum::from_terms(self.terms.iter().map(|t| Term { c: t.c * c, ..*t }).collect())
    }

    pub fn mul(&self, other: &TermSum) -> Result<TermSum> {
        let mut out = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                if a.p + b.p < -1 {
                    return Err(Error::Domain("product leaves the grammar".into()));
                }
                out.push(Term { c: a.c * b.c, p: a.p + b.p, mu: a.mu + b.mu });
            }
        }
        Ok(TermSum::from_terms(out))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Crude upper bound for sup_{x >= 0} |value| by dense sampling plus the
    /// two endpoint limits. Used only to gate contraction constants, which
    /// are over-satisfied anyway.
    pub fn sup_norm_sampled(&self) -> f64 {
        let mut m = self.eval(0.0).abs().max(self.limit_at_infinity().abs());
        let mut x = 1e-6;
        while x < 200.0 {
            m = m.max(self.eval(x).abs());
            x *= 1.07;
        }
        1.05 * m
    }
}

fn ordered(x: f64) -> u64 {
    x.to_bits()
}

fn powi(x: f64, p: i32) -> f64 {
    match p {
        0 => 1.0,
        _ => x.powi(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eval_simple_exponential() {
        let ts = TermSum::term(2.0, 0, 1.0);
        assert_relative_eq!(ts.eval(1.0), 2.0 * (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(ts.eval(0.0), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn eval_singular_pair_limit() {
        // 2 x^{-1} e^{-x} - 2 x^{-1}: limit at 0 is -2
        let ts = TermSum::from_terms(vec![
            Term { c: 2.0, p: -1, mu: 1.0 },
            Term { c: -2.0, p: -1, mu: 0.0 },
        ]);
        ts.validate().unwrap();
        assert_relative_eq!(ts.eval(0.0), -2.0, max_relative = 1e-14);
        // matches the literal sum away from zero
        let x = 0.3;
        assert_relative_eq!(
            ts.eval(x),
            2.0 * (-x).exp() / x - 2.0 / x,
            max_relative = 1e-13
        );
        // stable at tiny x
        assert_relative_eq!(ts.eval(1e-12), -2.0, max_relative = 1e-9);
        assert!(ts.vanishes_at_infinity());
    }

    #[test]
    fn empty_sum_is_zero() {
        let ts = TermSum::zero();
        assert_eq!(ts.eval(0.0), 0.0);
        assert_eq!(ts.eval(5.0), 0.0);
    }

    #[test]
    fn unmatched_singular_term_rejected() {
        let ts = TermSum::term(1.0, -1, 1.0);
        assert!(ts.validate().is_err());
    }

    #[test]
    fn unbounded_term_rejected() {
        let ts = TermSum::term(1.0, 2, 0.0);
        assert!(ts.validate().is_err());
    }

    #[test]
    fn derivative_examples() {
        // d/dx [x e^{-x}] = e^{-x} - x e^{-x}
        let ts = TermSum::term(1.0, 1, 1.0);
        let d = ts.derivative().unwrap();
        assert_relative_eq!(d.eval(0.7), (-0.7f64).exp() * (1.0 - 0.7), max_relative = 1e-14);

        let sq = TermSum::term(1.0, 2, 1.0);
        let d = sq.derivative().unwrap();
        // 2x e^{-x} - x^2 e^{-x}
        assert_relative_eq!(d.eval(0.5), (-0.5f64).exp() * (1.0 - 0.25), max_relative = 1e-14);

        let bad = TermSum::term(2.0, -1, 1.0);
        assert!(bad.derivative().is_err());
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let ts = TermSum::from_terms(vec![
            Term { c: 1.5, p: 2, mu: 0.8 },
            Term { c: -0.4, p: 0, mu: 0.0 },
            Term { c: 2.0, p: 1, mu: 2.0 },
        ]);
        let d = ts.derivative().unwrap();
        let h = 1e-5;
        for x in [0.1, 1.0, 5.0] {
            let fd = (ts.eval(x + h) - ts.eval(x - h)) / (2.0 * h);
            assert_relative_eq!(d.eval(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn products_stay_in_grammar() {
        let a = TermSum::term(3.0, -1, 1.0).add(&TermSum::term(-3.0, -1, 0.0));
        let b = TermSum::term(2.0, 1, 0.5);
        let prod = a.mul(&b).unwrap();
        let x = 0.9;
        assert_relative_eq!(prod.eval(x), a.eval(x) * b.eval(x), max_relative = 1e-13);
        // product of two singular terms leaves the grammar
        let c = TermSum::term(1.0, -1, 1.0).add(&TermSum::term(-1.0, -1, 0.0));
        assert!(a.mul(&c).is_err());
    }
}
