//! Slot-attention feature filtering for few-shot classification on frozen
//! patch embeddings.
//!
//! The pipeline for one image: slot attention seeded from the class token,
//! a slot filter that keeps class-relevant attention maps, and a class-aware
//! residual. Images are then compared patch-by-patch and the P×P similarity
//! map is scored by a small MLP.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod export;
pub mod filter;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod scorer;
pub mod slot_attention;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use model::{Ablation, ModelConfig, ModelParams};
pub use rng::SaffRng;
pub use tensor::Tensor;
pub use train::{evaluate, train, EvalReport, TrainConfig};
