//! Tensor-train compression of LSTM gate matrices.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;
pub mod ttrain;
pub mod contract;
pub mod autograd;
pub mod nn;
pub mod distill;
pub mod data;
pub mod model_file;
pub mod train;
pub mod report;
pub mod bench;
pub mod commands;

pub use error::{Error, Result};
