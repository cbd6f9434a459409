//! Multimodal emotion recognition in conversations, built from scratch on a
//! recording-tape autodiff core: per-modality temporal convolutions,
//! positional and speaker embeddings, a grid of intra-/inter-modal
//! transformer encoders, hierarchical gated fusion, and self-distillation
//! from the fused teacher into per-modality students.
//!
//! Everything runs on 64-bit floats with a documented, seedable RNG; a fixed
//! seed on a single thread reproduces runs bitwise.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, RunConfig};
pub use data::{Conversation, Dataset, DatasetHeader, Modality, Utterance, ALL_MODALITIES};
pub use error::{Error, Result};
pub use model::Model;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
