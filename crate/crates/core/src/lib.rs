//! Cycled memory networks for lifelong learning.
//!
//! A short-term network learns each new task while a frozen long-term network
//! feeds it through gated transfer cells. Afterwards the long-term network absorbs
//! the new task by distilling from both its own previous snapshot and the
//! short-term network.
//!
//! The crate is self-contained: [`tensor`] and [`graph`] provide the dense
//! arithmetic and reverse-mode differentiation everything else is built on.

pub mod baselines;
pub mod consolidation;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use consolidation::ConsolidationConfig;
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use metrics::{AccuracyMatrix, BaselineAccuracies, ParamReport};
pub use model::{CmnState, ModelConfig, Phase, Scope};
pub use num_rational::Ratio;
pub use nn::{InitScheme, InputShape, LayerKind, LayerSpec, NetworkParams, NetworkSpec};
pub use scalar::{Dtype, Scalar};
pub use tasks::{SyntheticMode, SyntheticSpec, TaskDataset, TaskSequence};
pub use tensor::Tensor;
pub use trainer::{OptimizerConfig, Phase as TrainPhase, RunConfig, TrainLog};
pub use transfer::{GateEmbedding, TransferCell, TransferLink, TransferStrategy};
