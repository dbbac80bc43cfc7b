//! Sequence modeling and translation from first principles: a small
//! reverse-mode autodiff engine, recurrent cells, count-based and neural
//! language models, an attention encoder-decoder with beam search, and the
//! usual evaluation metrics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod langmodel;
pub mod ngram;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod translate;

pub use error::{Error, Result};
pub use tensor::Tensor;
