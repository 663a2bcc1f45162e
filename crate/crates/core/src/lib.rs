//! Multimodal residual networks for toy visual question answering.

// `!(x > 0.0)` is how NaN-rejecting checks are written here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod net;
pub mod params;
pub mod tensor;
pub mod training;
pub mod visualization;

pub use error::{Error, Result};
pub use tensor::Tensor;
