//! Object-region learned image compression: a small autodiff engine, a
//! convolutional codec with a factorized entropy model, an exact range coder,
//! and the training and evaluation loop around them.

pub mod autodiff;
pub mod codec;
pub mod coder;
pub mod data;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod proxy;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
