//! Convolutional network training with spatial gradient scaling (SGS).
//!
//! A scaling matrix multiplies every convolution weight gradient position by
//! position. Scalings come from the mutual information between feature-map
//! pixels and their neighbours, from a fixed parameterization, or from the
//! coverage of a set of masked branches. [`reparam`] trains such a branched
//! convolution next to a scaled single one to check that the two agree.

pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod dependence;
pub mod error;
pub mod net;
pub mod optim;
pub mod reparam;
pub mod rng;
pub mod scaling;
pub mod tensor;
pub mod train;

pub use error::{Result, SgsError};
pub use tensor::{KernelMatrix, Scalar, Tensor4};
