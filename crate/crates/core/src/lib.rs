//! Differentiable k-means (DKM) weight clustering for train-time model compression.
//!
//! The [`dkm`] module holds the clustering layer itself; [`autodiff`] is the
//! tape it runs on. [`compression`] turns a clustering into a `.dkmz` file,
//! [`baselines`] has the hard, Gumbel, Lloyd and EM reference schemes, and
//! [`train`] drives toy-scale training runs with compressed layers.

pub mod autodiff;
pub mod baselines;
pub mod compression;
pub mod dkm;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod train;

pub use error::{DkmError, FormatError, Result};
