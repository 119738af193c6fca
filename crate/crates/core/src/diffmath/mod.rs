//! Tensors and a reverse-mode tape. Training runs the tape in `f64`;
//! frozen models replay the same ops in `f32` on a non-recording tape.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, FdCheck};
pub use real::Real;
pub use tape::{Mode, Tape, Var, MASK_OFF};
pub use tensor::Tensor;
