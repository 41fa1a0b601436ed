//! Structured channel pruning for small convolutional networks.
//!
//! The crate carries its own f32 tensor engine (forward and backward for a
//! fixed set of layer kinds), recovers inter-layer channel dependencies from
//! an execution trace, scores channels with a first-order Taylor criterion,
//! searches the layer-wise sparsity distribution with a Q-learning agent and
//! recovers accuracy with knowledge distillation.

pub mod data;
pub mod dependency;
pub mod distill;
pub mod error;
pub mod format;
pub mod graph;
pub mod layer;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod pruner;
pub mod search;
pub mod seed;
pub mod tensor;
pub mod zoo;

pub use dependency::{
    Analysis, ChannelMap, CoupledGroup, CoupledGroupSet, DependencyEdge, DependencyGraph,
};
pub use error::{Error, Result};
pub use graph::{Gradients, LayerNode, ModelGraph, Tape};
pub use layer::{LayerKind, Mode, Params};
pub use tensor::Tensor;
