//! Grid-based dynamic programming for nonlinear (sub)systems: policy
//! iteration on lookup tables, composition of sub-policies, closed-loop
//! rollouts and policy persistence.

mod grid;
mod persist;
mod pi;
mod rollout;
mod system;

pub use grid::{ActionLattice, Grid};
pub use persist::{read_policy, write_policy};
pub use pi::{evaluate_policy, policy_iteration, DpConfig, Subsystem, TabularPolicy};
pub use rollout::{compose_and_rollout, write_trajectory_csv, Rollout, RolloutConfig};
pub use system::{linearize, normalized_value_error, Dynamics, NonlinearSystem, Saturation};
