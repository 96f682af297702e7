//! Adaptive embedded Runge-Kutta integrator (Dormand-Prince 5(4)) with dense
//! output, for the short linear propagation runs used throughout the crate.

use crate::error::{Error, Result};
use nalgebra::DVector;

type V = DVector<f64>;

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
// dense-output weights
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// One accepted step with the interpolation data needed for dense output.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    r1: V,
    r2: V,
    r3: V,
    r4: V,
    r5: V,
}

impl DenseStep {
    /// Solution value inside the step, theta in [0, 1].
    pub fn eval(&self, theta: f64) -> V {
        let th1 = 1.0 - theta;
        &self.r1
            + theta
                * (&self.r2 + th1 * (&self.r3 + theta * (&self.r4 + th1 * self.r5.clone())))
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }
}

/// Integration trace: accepted steps in order.
#[derive(Debug, Clone)]
pub struct Trace {
    pub steps: Vec<DenseStep>,
    pub t_end: f64,
    pub y_end: V,
}

impl Trace {
    /// Evaluate at any t covered by the trace (monotone in either direction).
    pub fn eval(&self, t: f64) -> V {
        let forward = self.steps.first().map(|s| s.h > 0.0).unwrap_or(true);
        for s in &self.steps {
            let (lo, hi) = if forward { (s.t0, s.t1()) } else { (s.t1(), s.t0) };
            if t >= lo - 1e-12 && t <= hi + 1e-12 {
                let theta = ((t - s.t0) / s.h).clamp(0.0, 1.0);
                return s.eval(theta);
            }
        }
        self.y_end.clone()
    }
}

/// Integrate y' = f(t, y) from (t0, y0) to t_end (either direction), with
/// relative tolerance `rtol` and matching absolute floor.
pub fn integrate<F: FnMut(f64, &V) -> V>(
    f: F,
    t0: f64,
    y0: &V,
    t_end: f64,
    rtol: f64,
    keep_dense: bool,
) -> Result<Trace> {
    integrate_capped(f, t0, y0, t_end, rtol, keep_dense, f64::INFINITY)
}

/// As `integrate`, with a cap on the step size. Dense output between nodes is
/// fourth order, so callers that sample the trace densely cap the step.
pub fn integrate_capped<F: FnMut(f64, &V) -> V>(
    mut f: F,
    t0: f64,
    y0: &V,
    t_end: f64,
    rtol: f64,
    keep_dense: bool,
    max_step: f64,
) -> Result<Trace> {
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let span = (t_end - t0).abs();
    let atol = rtol;
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = f(t, &y);
    let mut h = (span / 20.0).min(0.1).min(max_step).max(1e-8) * dir;
    let mut steps = Vec::new();
    let mut n_steps = 0usize;

    if span == 0.0 {
        return Ok(Trace { steps, t_end, y_end: y });
    }

    loop {
        n_steps += 1;
        if n_steps > 2_000_000 {
            return Err(Error::Convergence("step limit exceeded in RK integration".into()));
        }
        if (t + h - t0).abs() > span {
            h = t_end - t;
        }
        let k2 = f(t + C[1] * h, &(&y + h * (A2[0] * &k1)));
        let k3 = f(t + C[2] * h, &(&y + h * (A3[0] * &k1 + A3[1] * &k2)));
        let k4 = f(t + C[3] * h, &(&y + h * (A4[0] * &k1 + A4[1] * &k2 + A4[2] * &k3)));
        let k5 = f(
            t + C[4] * h,
            &(&y + h * (A5[0] * &k1 + A5[1] * &k2 + A5[2] * &k3 + A5[3] * &k4)),
        );
        let k6 = f(
            t + C[5] * h,
            &(&y + h * (A6[0] * &k1 + A6[1] * &k2 + A6[2] * &k3 + A6[3] * &k4 + A6[4] * &k5)),
        );
        let y5 = &y
            + h * (B5[0] * &k1 + B5[2] * &k3 + B5[3] * &k4 + B5[4] * &k5 + B5[5] * &k6);
        let k7 = f(t + h, &y5);
        let y4 = &y
            + h * (B4[0] * &k1
                + B4[2] * &k3
                + B4[3] * &k4
                + B4[4] * &k5
                + B4[5] * &k6
                + B4[6] * &k7);

        let mut err: f64 = 0.0;
        for i in 0..y.len() {
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4[i]) / sc;
            err += e * e;
        }
        err = (err / y.len().max(1) as f64).sqrt();

        if err <= 1.0 {
            if keep_dense {
                let ydiff = &y5 - &y;
                let bspl = h * &k1 - &ydiff;
                let r5 = h
                    * (D[0] * &k1 + D[2] * &k3 + D[3] * &k4 + D[4] * &k5 + D[5] * &k6
                        + D[6] * &k7);
                steps.push(DenseStep {
                    t0: t,
                    h,
                    r1: y.clone(),
                    r2: ydiff.clone(),
                    r3: bspl.clone(),
                    r4: &ydiff - h * &k7 - bspl,
                    r5,
                });
            }
            t += h;
            y = y5;
            k1 = k7;
            if (t - t_end).abs() <= 1e-14 * span.max(1.0) || (t - t0).abs() >= span {
                break;
            }
        }
        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
        if h.abs() > max_step {
            h = max_step * dir;
        }
        let min_h = 1e-13 * span.max(1.0);
        if h.abs() < min_h {
            return Err(Error::Convergence(format!(
                "RK step size collapsed at t = {t} (step {h:e})"
            )));
        }
    }
    Ok(Trace { steps, t_end: t, y_end: y })
}

/// Convenience: final value only.
pub fn propagate<F: FnMut(f64, &V) -> V>(f: F, t0: f64, y0: &V, t_end: f64, rtol: f64) -> Result<V> {
    Ok(integrate(f, t0, y0, t_end, rtol, false)?.y_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_exponential() {
        let y0 = V::from_column_slice(&[1.0]);
        let y = propagate(|_, y| -y.clone(), 0.0, &y0, 3.0, 1e-10).unwrap();
        assert_relative_eq!(y[0], (-3.0f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn backward_integration() {
        let y0 = V::from_column_slice(&[1.0]);
        let y = propagate(|_, y| y.clone(), 2.0, &y0, 0.0, 1e-10).unwrap();
        assert_relative_eq!(y[0], (-2.0f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn dense_output_matches_truth() {
        let y0 = V::from_column_slice(&[1.0, 0.0]);
        // harmonic oscillator
        let trace = integrate(
            |_, y| V::from_column_slice(&[y[1], -y[0]]),
            0.0,
            &y0,
            6.0,
            1e-10,
            true,
        )
        .unwrap();
        for k in 0..60 {
            let t = 0.1 * k as f64;
            let y = trace.eval(t);
            assert_relative_eq!(y[0], t.cos(), epsilon = 1e-7);
            assert_relative_eq!(y[1], -t.sin(), epsilon = 1e-7);
        }
    }

    #[test]
    fn nonautonomous_rhs() {
        // y' = 2 t y  =>  y = exp(t^2)
        let y0 = V::from_column_slice(&[1.0]);
        let y = propagate(|t, y| 2.0 * t * y, 0.0, &y0, 1.5, 1e-11).unwrap();
        assert_relative_eq!(y[0], (1.5f64 * 1.5).exp(), max_relative = 1e-8);
    }
}
