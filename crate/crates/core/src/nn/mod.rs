//! Minimal neural-network toolkit: matrices, a reverse-mode tape, layers,
//! optimizers, finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod optim;
mod params;

pub use graph::{counter_uniform, AttentionMask, Gradients, Graph, Mode, Var};
pub use layers::{Dense, EncoderLayer, GruCell, LayerNorm, MultiHeadAttention};
pub use matrix::Matrix;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Group, ParamId, ParamStore, Parameter};
