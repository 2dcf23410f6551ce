//! Simulation of dynamic coalitional games with transferable utility,
//! cast as a flow-control problem: coalition excesses are driven by
//! allocation controllers toward the core of a nominal game.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coalition;
pub mod config;
pub mod control;
pub mod diagnostics;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod linalg;
pub mod sim;
pub mod source;

pub use coalition::{
    AllocationBounds, Coalition, CoalitionIndex, ControlVector, ExcessState, FeasibleSet, GameVector,
};
pub use config::{validate_config, ConfigError, ExperimentConfig};
pub use control::{AllocationRule, ControllerKind, ThresholdMode};
pub use error::{Error, Result};
pub use linalg::SystemMatrices;
pub use sim::{FlowState, FlowSystem, SimConfig, TrajectoryRecord};
