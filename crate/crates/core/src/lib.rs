pub mod augment;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod halo;
pub mod losses;
pub mod network;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, DType, Element, Tensor};
