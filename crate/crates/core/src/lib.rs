//! Multi-scale DAG-structured convolutional networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and the numeric kernels.
//! * [`graph`]: the DAG, its executor, and generalized backpropagation.
//! * [`multiscale`]: builds backbone-plus-taps networks and extracts pooled
//!   multi-scale features.
//! * [`select`]: per-layer analyses, greedy scale selection, retrieval.
//! * [`train`]: SGD, off-the-shelf training, gradient checking, and the
//!   gradient-magnitude experiment.
//! * [`data`]: IDX ingestion, preprocessing, and the synthetic
//!   coarse-versus-fine task.
//! * [`diagnose`]: the chain/DAG × off-the-shelf/fine-tuned comparison.
//! * [`fixtures`]: seeded random graphs for tests and benchmarks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnose;
pub mod fixtures;
pub mod graph;
pub mod init;
pub mod multiscale;
pub mod select;
pub mod tensor;
pub mod train;

pub use graph::{BackwardMode, ExecContext, Gradients, Graph, GraphError, LayerKind, NodeId};
pub use init::Init;
pub use multiscale::{toy_backbone, BackboneLayer, BackboneSpec, InitScheme, TapSet};
pub use tensor::{Shape, Tensor, TensorError};
