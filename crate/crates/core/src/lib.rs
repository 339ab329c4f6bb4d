//! CNN training with approximated convolution filter gradients.
//!
//! Each convolutional layer's filter gradient can be replaced, per layer and
//! per batch, by zeros, fresh Gaussian noise, or a top-1 sparsified estimate
//! computed by a patch-extraction kernel. An approximation [`schedule`] picks
//! the method for every `(layer, batch)` cell.

pub mod approx;
pub mod bench;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod real;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{FilterLayout, FilterTensor, Layout, Tensor4};
