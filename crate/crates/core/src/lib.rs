//! Deterministic simulation of federated recommender systems under targeted
//! model poisoning.
//!
//! Malicious clients mine popular items from how item embeddings move
//! between rounds and use them either to align target items with popular
//! ones ([`attack::pieckipe_gradients`]) or as stand-ins for the private
//! user embeddings ([`attack::pieckuea_gradients`]). The server can apply
//! robust aggregation ([`defense::aggregate`]) and benign clients can train
//! with the regularization defense ([`defense::defended_client_step`]).

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod similarity;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
