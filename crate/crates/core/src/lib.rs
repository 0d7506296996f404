//! Environmental sound deepfake detection: log-mel front end, patch
//! transformer encoder, multi-layer fusion, dual graph-attention branches,
//! Griffin-Lim copy-synthesis augmentation, training and EER evaluation.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod branch;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod fusion;
pub mod harness;
pub mod label;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
pub use label::Label;
