//! Simulation and numerical-verification toolkit for piecewise deterministic
//! Markov processes (PDMPs) with degenerate house-of-cards jumps.
//!
//! Between jumps the state follows the deterministic flow of an ODE
//! `x' = b(x)`; at state-dependent random times a single particle jumps,
//! resetting its own coordinate to zero and shifting the others. The crate
//! provides:
//!
//! - [`model`]: model descriptions (drift, jump maps, rates) with the
//!   interacting-neuron preset and the non-interacting specialization,
//! - [`flow`]: fixed-step RK4 flow integration, variational (sensitivity)
//!   matrices, survival probabilities and scalar-flow inversion,
//! - [`simulate`]: exact trajectory sampling by thinning, path records,
//!   ergodic and jump-chain averages, generator residuals,
//! - [`skeleton`]: jump-time skeletons, the derivation matrix of the skeleton
//!   endpoint with respect to the jump times, and goodness certificates,
//! - [`density`]: invariant-measure estimation, the representation formula,
//!   one-step density propagation through a jump (coarea change of
//!   variables), integration-by-parts checks and the regularity-threshold
//!   calculator.

// Validation guards use `!(x > 0.0)` style comparisons on purpose: unlike
// `x <= 0.0` they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density;
pub mod error;
pub mod flow;
pub mod model;
pub mod numeric;
pub mod simulate;
pub mod skeleton;
pub mod stats;

pub use error::{Error, Result};
pub use flow::IntegratorConfig;
pub use model::{ModelSpec, NeuronParams, NonInteractingSpec};
pub use simulate::{PathRecord, RngSpec};
pub use skeleton::{DerivationMatrix, JumpSchedule, SkeletonTrace};

/// Column vector state of the `N`-particle system.
pub type State = nalgebra::DVector<f64>;
/// Dense `N x N` (or `N x (n+1)`) real matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
