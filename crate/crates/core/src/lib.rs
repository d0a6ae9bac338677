//! Cross-lingual knowledge distillation for a fusion-encoder vision-language
//! model.
//!
//! An English teacher transfers its hidden representations to a
//! target-language student through parallel questions over shared images.
//! The student is trained to match the teacher's `[CLS]`, image-region,
//! object-tag and code-switched word embeddings on a set of layers, then
//! fine-tuned for visual question answering.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root fix
//! it to `f32` (training) or `f64` (gradient checks).

pub mod autograd;
pub mod checkpoint;
pub mod codemix;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
