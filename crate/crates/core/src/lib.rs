pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod nn;
pub mod par;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
