pub mod attacks;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
