//! Exchanging-based multimodal fusion for text and images.
//!
//! Two parameter-shared Transformer streams swap low-attention token
//! embeddings for the other modality's mean embedding, with captioning and
//! text-to-image decoders regularizing the encoders.

pub mod codec;
pub mod crosstransformer;
pub mod data;
pub mod error;
pub mod harness;
pub mod heads;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{MuseError, Result};

/// Seeded random stream used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;
