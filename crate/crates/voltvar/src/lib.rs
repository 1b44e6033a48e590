//! Optimal design of IEEE 1547 Volt/VAR control rules on linearized
//! distribution feeders.
//!
//! The closed-loop inverter/grid dynamics are simulated as an unrolled,
//! weight-shared network ([`twin`]); rule parameters are trained with
//! projected stochastic gradient descent ([`trainer`]); stability is
//! certified spectrally and via polytopic slope restrictions ([`stability`]);
//! and equilibria are cross-checked with KKT residuals, region enumeration,
//! and grid search ([`benchmark`]).

pub mod benchmark;
pub mod dynamics;
pub mod error;
pub mod feeder;
pub mod rules;
pub mod stability;
pub mod trainer;
pub mod twin;

pub use error::{Result, VoltVarError};
