pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub mod nn;
pub mod params;
pub mod moe;
pub mod frontend;
pub mod model;
pub mod losses;
pub mod decoding;
pub mod artifacts;
pub mod training;
