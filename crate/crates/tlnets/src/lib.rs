//! Transformation-learning networks for long-range time-series forecasting.
//!
//! The crate builds four forecasters — `ft_svd`, `ft_matrix`, `ft_conv` and
//! `conv_svd` — from four learnable transform blocks (spectral weights applied
//! in the Fourier domain, SVD-factor Hadamard mixing, masked sparse matrices,
//! and 1D convolutions), all running on a small reverse-mode autodiff tape in
//! 64-bit floats. A data pipeline, deterministic trainer, metrics reporting
//! and a numeric verification suite round out the toolkit; see the `examples/`
//! directory for runnable entry points and the `tlnet` binary for the CLI.

pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod runconfig;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
