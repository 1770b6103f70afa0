//! Cross-modal low-rank adaptation for dual-encoder transformers.
//!
//! Two frozen single-head transformer encoder stacks are adapted with two
//! low-rank pathways per linear component: an intra-modal LoRA branch and an
//! inter-modal branch whose r-by-r core is generated per forward pass by a
//! hypernetwork from the paired encoder's pooled features, gated by a
//! learnable scalar. The crate also carries analytic parameter/FLOPs
//! accounting, a synthetic cross-modal task with a training harness, and a
//! finite-difference gradient-check suite.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod graph;
pub mod numgrad;
pub mod linalg;
pub mod adapters;
pub mod encoder;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::{Param, Tensor};
