pub mod accounting;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod projector;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transformer;
pub mod visualize;

pub use error::{Result, TensorError, VtError};
pub use tensor::{Scalar, Tensor};
