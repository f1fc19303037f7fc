//! Representation search for policy decomposition.
//!
//! The crate computes LQR approximations of optimal policies, evaluates the
//! value-error of decomposing a control problem into input groups, searches
//! for good decompositions (exhaustively or with a genetic algorithm), and
//! derives linear state/input maps under which good decompositions exist.
//! Nonlinear systems are handled with grid-based policy iteration.

pub mod care;
pub mod decomposition;
pub mod error;
pub mod experiments;
pub mod ga;
pub mod linalg;
pub mod representation;
pub mod serde_util;
pub mod tabular;
pub mod zoo;

pub use error::{Error, Result};
