//! Deterministic simulator for decentralized personalized learning.
//!
//! Clients hold private non-iid shards and exchange model parameters with
//! peers chosen each round. The adaptive protocol samples peers through a
//! temperature softmax over inverse-loss similarities, fills in unmeasured
//! similarities through two-hop neighbours, merges by federated averaging and
//! trains locally. Random gossip, PENS, a cluster oracle and local-only
//! training are provided for comparison.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f64` instantiation.

pub mod config;
pub mod datagen;
pub mod error;
pub mod model;
pub mod protocols;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod similarity;
pub mod simulator;

pub use error::{Error, Result};
pub use protocols::ProtocolKind;
pub use scalar::Scalar;
pub use simulator::{ExperimentConfig, ExperimentResult};

pub type Dataset = datagen::Dataset<f64>;
pub type Sample = datagen::Sample<f64>;
pub type ClientShard = datagen::ClientShard<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type OptimizerState = model::OptimizerState<f64>;
pub type SimilarityState = similarity::SimilarityState<f64>;
pub type ClientRuntime = protocols::ClientRuntime<f64>;
pub type Simulation = simulator::Simulation<f64>;

pub type DatasetF32 = datagen::Dataset<f32>;
pub type ModelParamsF32 = model::ModelParams<f32>;
pub type SimulationF32 = simulator::Simulation<f32>;
