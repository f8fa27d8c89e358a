//! Structured convolution with Gaussian-derivative filter bases whose
//! scale, and with it the filter size, is learned by gradient descent.

pub mod basis;
pub mod data;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod imageio;
pub mod nn;
pub mod resample;
pub mod synthesis;
pub mod train;
pub mod cli;

pub use error::{Error, Result};
