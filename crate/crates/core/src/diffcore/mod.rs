//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns [`Gradients`] for every parameter
//! (and every [`Graph::variable`] leaf) that the loss depends on.
//!
//! The layer set is deliberately small: dense, 3×3 convolution, 2×2
//! max-pool, ReLU/sigmoid/tanh, softmax, cross-entropy, cosine similarity
//! and the LSTM cell.

pub mod gradcheck;
mod graph;
mod lstm;
mod optim;
mod params;
mod tensor;

pub use graph::{cosine_similarity, softmax_rows, Gradients, Graph, NodeId};
pub use lstm::{lstm_step, LstmNodes, LstmParams};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{decode_params, encode_params, glorot_uniform, ParamId, ParamStore};
pub use tensor::Tensor;

use std::path::Path;

use crate::error::{Error, Result};

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_params(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests;
