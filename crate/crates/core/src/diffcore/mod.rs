//! Reverse-mode automatic differentiation over dense matrices, the
//! moment-based optimizer, and the checkpoint format.

pub mod checkpoint;
mod grid;
mod params;
mod tape;
mod tensor;

pub use grid::Grid2;
pub use params::{lr_schedule, AdamConfig, GradMap, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
