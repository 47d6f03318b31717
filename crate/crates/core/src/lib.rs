//! Numerical toolkit for Weyl pseudo-differential operators on periodic
//! grids: symbol calculus, admissibility weights, bicharacteristic flows,
//! linear and nonlinear dispersive solvers, and measurement harnesses for
//! weighted smoothing estimates.

pub mod appendix_checks;
pub mod calculus;
pub mod error;
pub mod evolve;
pub mod grid;
pub mod hamilton;
pub mod nonlinear;
pub mod symbol;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{Field, Grid, Point, SpectralField, C64};
pub use symbol::{Symbol, Verdict};
