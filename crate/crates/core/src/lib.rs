pub mod crgan;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod reid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{sgd_step, Param, SgdConfig, Tensor};
