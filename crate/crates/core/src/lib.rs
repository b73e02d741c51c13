//! Multi-aspect knowledge distillation for small transformers.
//!
//! A dense teacher is compressed by truncated SVD of its projection matrices
//! into a low-rank student of the same depth and width. The student is then
//! trained against three families of targets: intermediate projections
//! inside each layer (matrix aspect), attention maps and hidden states
//! (layer aspect), and softened output distributions (model aspect).

// `!(x > 0.0)` is how config checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod factorize;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{MakdError, Result};
