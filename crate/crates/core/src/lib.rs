//! Energy-based discontinuous Galerkin solver for wave equations with a
//! Caputo-type variable-order time-fractional derivative.
//!
//! The equation d^2u/dt^2 + D_t^(beta(t)) u - Lap u = f with beta(t) in (1,2)
//! is reformulated as a first-order system in (u, v = du/dt), discretized in
//! space by an energy-based DG method with mesh-independent fluxes, and
//! advanced in time with a second-order variable-order memory scheme evaluated
//! at a specially chosen point inside each step.
//!
//! Modules:
//! - [`quadrature`]: Gauss-Legendre rules and the orthonormal Legendre basis
//! - [`mesh`]: uniform periodic interval / Cartesian meshes
//! - [`kernel`]: order function, sigma_m, s_m, memory weights, diagnostics
//! - [`space`]: discrete spaces, element/flux operators, projections, norms
//! - [`stepper`]: the fully discrete scheme and energy diagnostics
//! - [`solution`]: manufactured solutions and analytic source terms
//! - [`harness`]: experiment drivers, convergence sweeps, CSV output
//! - [`reference`]: independent oracles used only for validation

pub mod error;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod reference;
pub mod solution;
pub mod space;
pub mod stepper;

pub use error::{Result, SolverError};
