//! Wavelet-spectrum diffusion transformer for image super-resolution.

pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod wavelet;
pub mod wsdt;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type Wsdt32 = wsdt::Wsdt<f32>;
pub type Wsdt64 = wsdt::Wsdt<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
