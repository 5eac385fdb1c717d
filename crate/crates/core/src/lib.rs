//! Arbitrary-scale image super-resolution with a weighted Fourier neural
//! operator score network, a linear degradation diffusion and a
//! probability-flow ODE sampler.
//!
//! All arithmetic is in `f64`. Tensors are row-major `B × H × W × C`.

pub mod autodiff;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Image, Tensor};
