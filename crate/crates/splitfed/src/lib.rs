//! Split federated learning at desk scale: a layer-chain network is cut
//! between simulated edge clients and a central server, cut-layer activations
//! and gradients cross a bit-exact binary protocol with optional top-K
//! sparsification, and a deterministic simulator records convergence and
//! per-scheme traffic.

pub mod arch;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod protocol;
pub mod sparse;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
