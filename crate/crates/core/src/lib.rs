//! Monte-Carlo solver for mean-field game equilibria in weak formulation.
//!
//! The state is a driftless SDE under a reference measure; controls act through a
//! Girsanov change of measure. An equilibrium is found by iterating a solution map
//! over weighted particle measure flows, where each step solves a quadratic BSDE by
//! backward least-squares regression.

pub mod bsde;
pub mod error;
pub mod fixedpoint;
pub mod girsanov;
pub mod io;
pub mod measure;
pub mod model;
pub mod paths;
pub mod regression;
pub mod stats;

pub use error::{Error, Result};
pub use model::{GameModel, ModelRegistry};
