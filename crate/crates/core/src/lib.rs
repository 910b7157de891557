//! Contextual moving-horizon disturbance estimation for quadrotor flight.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod dynamics;
pub mod environment;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mhe;
pub mod network;
pub mod seed;
pub mod selection;
pub mod sensitivity;
pub mod sim;
pub mod training;
pub mod trajectory;

pub use control::{ControlGains, ReferencePoint, ThrustMoment};
pub use dynamics::{Disturbance, QuadParams, RigidBodyState, WindContext};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RunMetadata, RunRecord};
pub use mhe::{AugmentedState, HorizonWindow, MheSolution, MheWeights};
pub use network::WeightNet;
pub use sim::SimConfig;
pub use training::TrainConfig;
