//! Boundary value problems on the half-line for linear ODE systems with a
//! first-order pole at the origin:
//!
//! ```text
//! y' = (A/x + B(x)) y + a/x + f(x),   y in C1([0, inf)),  y(+inf) = 0.
//! ```
//!
//! The crate constructs the fundamental operator near the singular point, the
//! exponential-dichotomy data at infinity, the six-part classification of
//! homogeneous solutions, the (generalized) Green kernel, the solvability
//! conditions, and the integral representation of solutions; it also computes
//! the Noether index of the underlying solution operator.
//!
//! The `singbvp` binary exposes the pipeline as `solve`, `classify`,
//! `verify-green` and `manufacture` subcommands over a JSON problem-file
//! format; see the crate README.

pub mod error;
pub mod linalg;
pub mod quad;
pub mod ode;
pub mod grammar;
pub mod problem;
pub mod nearzero;
pub mod dichotomy;
pub mod lattice;
pub mod kernels;
pub mod green;
pub mod solver;
pub mod report;

pub use error::{Error, Result};
