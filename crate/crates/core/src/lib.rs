pub mod align;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod run;
pub mod tensor;
pub mod train;

pub use autodiff::{CrossEntropy, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
