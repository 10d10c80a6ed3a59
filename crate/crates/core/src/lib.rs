//! Anisotropic sparse-attention segmentation stack for 3D brightfield volumes.
//!
//! Volumes are tokenised by an anisotropic patch embedding, processed by a
//! backbone of sparse-attention and soft mixture-of-experts blocks whose
//! hidden states stay on the unit hypersphere, and decoded back to a
//! full-resolution logit volume. Everything runs in `f64` on the CPU with a
//! small tape-based autodiff engine.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod decoder;
pub mod dhc;
pub mod error;
pub mod gradcheck;
pub mod hypersphere;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nsa;
pub mod oracle;
pub mod params;
pub mod patch_embed;
pub mod rng;
pub mod softmoe;
pub mod synthgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
