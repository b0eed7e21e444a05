pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod divergence;
pub mod error;
mod kernels;
pub mod model;
pub mod phantom;
pub mod segloss;
pub mod tape;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
