//! Minimal reverse-mode differentiation and the SGD optimizer.

pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{LrSchedule, NamedParam, OptimState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
