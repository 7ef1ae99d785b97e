//! Toy-scale generative adversarial network laboratory.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod diffusion;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod toydata;
pub mod trainers;

pub use matrix::Matrix;
