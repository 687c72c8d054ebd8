//! Sequence-to-sequence abstractive summarization built on a Transformer
//! encoder-decoder whose final encoder states are re-distributed with history
//! collected from earlier encoder layers, plus pointer copying for
//! out-of-vocabulary words, BPE subword segmentation, beam-search generation,
//! and ROUGE/novelty evaluation.
//!
//! The numeric substrate is a small reverse-mode autodiff engine generic over
//! the scalar type: `f32` for training, `f64` for finite-difference gradient
//! verification.

pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use ops::Mask;
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision model.
pub type Model32 = model::Model<f32>;
/// Gradient-check-precision model.
pub type Model64 = model::Model<f64>;
