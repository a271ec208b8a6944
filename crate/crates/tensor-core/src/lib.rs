//! Minimal deterministic reverse-mode autodiff over dense `f64` tensors.
//!
//! The op set is exactly what a small detection neck needs: convolution
//! (with stride and dilation), sigmoid/relu/ln/softmax, elementwise
//! arithmetic with one sanctioned broadcast (a single-channel map gating a
//! multi-channel NCHW tensor), nearest upsampling, concatenation, gather,
//! reshape and weighted reductions. Everything runs in `f64` with no
//! hidden parallelism so gradients are reproducible bit for bit.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_at};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, SSPT_MAGIC};
