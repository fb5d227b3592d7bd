//! Weyl solutions, Weyl functions, eigenvalues and resolvents of
//! `-y'' + q y = lambda y` on the half-line with complex potentials.

pub mod cli;
pub mod error;
pub mod oracle;
pub mod plot;
pub mod potential;
pub mod propagate;
pub mod spectrum;
pub mod weyl;

pub use error::{Error, Result};
pub use potential::{Potential, C64};
