//! Learned distribution embeddings for sequence recognition.
//!
//! A 1-D convolutional network turns a multichannel sequence into `K`
//! activation sequences. Each activation sequence is summarised by a
//! piecewise-linear quantile function with learned sampling levels, and two
//! sequences are compared with the per-filter p-Wasserstein distance computed
//! in closed form.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod model;
pub mod quantile;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wasserstein;

pub use data::{Dataset, SequenceRecord};
pub use model::{Method, Model, ModelConfig, NetworkConfig, Representation};
pub use quantile::{AlphaParams, QuantileEmbedding};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
pub use wasserstein::{wasserstein_distance, DistanceConfig};
