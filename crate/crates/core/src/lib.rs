//! Fully convolutional tri-branch network (FCTN) for unsupervised domain
//! adaptation in semantic segmentation.
//!
//! A shared convolutional base feeds three identical branches. Two of them
//! (F1, F2) are trained on labeled source images and pseudo-label the target
//! domain where they agree with high confidence; the third (Ft) learns from
//! those pseudo-labels only and is the branch used for inference.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod cli;
pub mod config;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Element, Tensor};

/// Mask value for pixels excluded from losses and evaluation.
pub const IGNORE_ID: u8 = 255;
