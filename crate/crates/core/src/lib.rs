//! Query-based instance segmentation with per-instance multi-label attributes.
//!
//! A tiny convolutional encoder produces a feature pyramid and a fused
//! high-resolution map. A cascaded two-stream decoder refines object queries
//! (masks and categories) and attribute queries (multi-label attributes) that
//! share the same mask predictions. Training uses bipartite matching with
//! focal, dice and binary cross-entropy losses; evaluation reports mask AP,
//! the joint mask+attribute AP and their gap.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck_suite;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{LossConfig, ModelConfig, OptimConfig, QueryMode, RunConfig};
pub use decoder::StagePrediction;
pub use encoder::{FeaturePyramid, QueryState};
pub use error::{Error, Result, TensorError};
pub use loss::{LossBreakdown, MatchAssignment, Target};
pub use model::Model;
pub use tensor::{Graph, Tensor, Var};
