#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Numerical laboratory for the damped Schrödinger operator
//! `H = P - i a <D>^α a` on a periodic box.
//!
//! Layers, bottom-up:
//! - [`spectral`]: grids, fields, Fourier multipliers, weights, dilations.
//! - [`model`]: metric and damping specs, assembly of `P`, `B_α` and `H`.
//! - [`krylov`]: restarted GMRES, power iteration, Krylov exponentials.
//! - [`resolvent`]: resolvent solves, weighted resolvent-power norms and
//!   algebraic identity checks.
//! - [`propagator`]: time evolution `e^{-itH}` and its observables.
//! - [`flow`]: Hamiltonian flow of `p(x, ξ) = ⟨G(x)ξ, ξ⟩`, trapping and
//!   geometric control probes.
//! - [`experiments`]: scenario library, config files and verdict reports.

pub mod error;
pub mod experiments;
pub mod flow;
pub mod krylov;
pub mod model;
pub mod par;
pub mod propagator;
pub mod resolvent;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{assemble, DampedOperator, DampingProfile, DampingSpec, MetricKind, MetricSpec, WeightChoice};
pub use num_complex::Complex64;
pub use par::Exec;
pub use spectral::{ComplexField, FourierSymbol, Grid};
