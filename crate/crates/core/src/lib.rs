//! Skeleton extraction from binary shape images with a context-attention UNet.
//!
//! - [`tensor`]: dense tensors, reverse-mode differentiation, SGD and cosine annealing.
//! - [`image`]: binary rasters, PGM I/O, hole filling, exact distance transform, thinning.
//! - [`model`]: the encoder-decoder network with residual and context-attention blocks.
//! - [`loss`]: Dice and weighted focal losses with deep supervision, pixel F1, threshold sweep.
//! - [`train`]: configs, dataset handling, the training loop, checkpoints and prediction.

pub mod error;
pub mod image;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
