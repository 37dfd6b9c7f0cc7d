//! Equilibrium propagation in its classic and continual forms, and the tools
//! to compare their updates against gradients computed by backpropagation
//! through time.
//!
//! The crate is organised bottom-up: dense numerics, the layered energy-based
//! network, the two phases of training, reference gradients, the update versus
//! gradient comparison, a one-dimensional toy model with closed forms, MNIST
//! loading and the training loops.

pub mod config;
pub mod data;
pub mod error;
pub mod gdd;
pub mod gradients;
pub mod model;
pub mod numerics;
pub mod phases;
pub mod rng;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use model::{Hyperparams, LayeredNetwork, Mode, NetworkState, Weights};
pub use numerics::{ActivationKind, Matrix};
pub use phases::Algorithm;
pub use config::ExperimentConfig;
pub use training::{NetSpec, TrainConfig, TrainReport};
