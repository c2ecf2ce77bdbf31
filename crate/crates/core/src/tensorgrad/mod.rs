//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward primitive is a method on [`Tape`] that records its inputs
//! (and any activations needed later) and checks its output for NaN/Inf.
//! [`Tape::backward`] replays the record in reverse.

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheckOptions, GradCheckReport};
pub use params::ParamStore;
pub use tape::{Activation, BilinearTap, Gradients, Tape, Var};
pub use tensor::Tensor;
