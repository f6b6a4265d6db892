//! Dense `f32` tensors, a define-by-run differentiation tape, parameter
//! storage and the checkpoint container.

pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Mask, PairRotation, Tape, Var};
pub use tensor::{Element, Tensor};
