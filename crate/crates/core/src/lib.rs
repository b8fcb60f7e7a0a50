//! Online learning of quadrotor residual dynamics with a neural-ODE ensemble,
//! closed inside a nonlinear model predictive controller.

pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod log;
pub mod mlp;
pub mod mpc;
pub mod orchestrator;
pub mod report;
pub mod sim;
pub mod trainer;

pub use config::ExperimentConfig;
pub use dynamics::{ControlInput, QuadParams, QuadState};
pub use ensemble::{DiscreteEnsemble, EnsembleModel};
pub use error::{Error, Result};
