//! Graph-matching based pre-training for graph neural networks.
//!
//! A GIN encoder produces node representations; a matching head exchanges
//! intra-graph messages and cross-graph attention messages between two
//! graphs and pools the result into a pair-dependent ("adaptive") graph
//! representation. On top of that sit an InfoNCE-style contrastive objective
//! with anchor sampling and gradient accumulation, two supervised
//! objectives, a fine-tuning harness and ROC-AUC evaluation.

pub mod error;
pub mod augment;
pub mod checks;
pub mod encoder;
pub mod evaluation;
pub mod graph;
mod init;
pub mod io;
pub mod matcher;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
