//! Numerical machinery for linear and quasilinear differential equations with
//! piecewise constant generalized argument (DEPCAG): transition matrices,
//! exponential dichotomies, Green kernels, bounded-solution operators and the
//! construction and certification of the topological conjugacy between a
//! hyperbolic linear system and its quasilinear perturbation.

pub mod bounded;
pub mod conjugacy;
pub mod dichotomy;
pub mod dynamics;
pub mod error;
pub mod exprlang;
pub mod grid;
pub mod linear_flow;
pub mod numerics;
pub mod transition;

pub use error::{Error, Result};
pub use exprlang::{BoundMethod, CertifiedBound, Expr, VarBlock, VarRanges};
pub use grid::{Grid, GridKind};
