//! Multi-linear (block-term) attention and a small tensorized transformer
//! language model built on it.
//!
//! Module map:
//!
//! * [`tensor`]: dense matrices, 3-order tensors, Tucker / block-term
//!   reconstruction, split-and-concatenate, softmax.
//! * [`autodiff`]: reverse-mode tape and the finite-difference oracle.
//! * [`attention`]: scaled dot-product, multi-head, single-block and
//!   multi-linear attention, reconstruction identities and compression
//!   accounting.
//! * [`model`]: the language model, parameter and FLOP audits.
//! * [`training`]: corpus, batching, loss, schedule, Adam, perplexity.
//! * [`checkpoint`]: binary checkpoint format.
//! * [`verify`]: executable property suites.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar, Tensor3};
