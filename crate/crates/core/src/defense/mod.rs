//! Server-side robust aggregation and the client-side regularization defense.

pub mod aggregate;
mod regularize;

pub use aggregate::{AggregationStats, AggregatorKind, AggregatorSpec};
pub use regularize::{defended_client_step, defense_regularizers, DefenseParams, Regularizers};
