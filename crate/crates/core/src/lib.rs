//! Symmetric U-Net all-in-one image restoration with optional semantic
//! guidance, on a small reverse-mode autograd engine.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod semantic;
pub mod tensor;
pub mod train;

pub use autograd::{Conv2dSpec, Gradients, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
