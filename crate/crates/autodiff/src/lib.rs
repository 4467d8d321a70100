//! A small tape-based reverse-mode automatic differentiation engine over
//! dense `f64` tensors.
//!
//! Build a [`Tape`] per forward pass, bind parameters with [`Tape::param`],
//! compose ops on [`Var`]s and call [`Var::backward`] on a scalar loss. The
//! op set is what convolutional audio codecs and small transformers need:
//! suffix-broadcast arithmetic, matmul, fused softmax/cross-entropy,
//! normalizations, strided (transposed) 1-D convolutions and an FFT-backed
//! STFT whose backward pass is its exact adjoint.

pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use ops::conv::Conv1dSpec;
pub use ops::nn::{log_softmax_rows, softmax_rows};
pub use ops::spectral::{hann_periodic, StftPlan};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, Tensor};
