//! Cross-entropy importance sampling for estimating rare failure
//! probabilities `P(Y > l)` of stochastic simulators.
//!
//! The importance density is a Gaussian mixture fitted by weighted EM to all
//! data gathered so far; its order is picked by the cross-entropy information
//! criterion, and replications are spread over inputs by an asymptotic
//! optimal-allocation rule.

pub mod allocation;
pub mod cic_select;
pub mod densities;
pub mod driver;
pub mod error;
pub mod estimators;
pub mod fmt;
pub mod harness;
pub mod model;
pub mod parallel;
pub mod quadrature;
pub mod rng;
pub mod weighted_em;

pub use densities::{GmmParams, InputDensity};
pub use driver::{run_ce_sis, RunConfig, RunReport};
pub use error::{CesisError, Result};
pub use model::{OracleModel, SimulationModel};
