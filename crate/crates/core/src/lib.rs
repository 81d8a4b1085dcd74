//! Transformer-based inter-agent communication (MACTAS) on top of
//! value-decomposition Q-learning, with the exploration scheme, deployment
//! simulator, toy environments and oracles needed to exercise it.
//!
//! All numerical code is generic over [`Scalar`]; `f32` is used for training
//! and `f64` for gradient checks.

pub mod agent;
pub mod comm;
pub mod envs;
pub mod error;
pub mod exploration;
pub mod ipu;
pub mod learner;
pub mod mixer;
pub mod nn;
pub mod run;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = nn::Matrix<f32>;
pub type Matrix64 = nn::Matrix<f64>;
pub type Learner32 = learner::Learner<f32>;
pub type Learner64 = learner::Learner<f64>;
pub type Networks32 = learner::Networks<f32>;
pub type Networks64 = learner::Networks<f64>;
