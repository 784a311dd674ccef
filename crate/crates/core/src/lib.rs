//! Attention captioning decoders, learnable-gate pruning and the tooling
//! around them: magnitude-pruning baselines, a compressed-row inference
//! runtime, decoding metrics and a synthetic scene-captioning corpus.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gating;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
