//! Dense tensors and a reverse-mode automatic-differentiation tape.
//!
//! Every operation is a method on [`Tape`] returning a [`Var`] handle. Values
//! are immutable once recorded; [`Tape::backward`] replays the record in
//! reverse and accumulates gradients into tracked leaves.
//!
//! The tape is generic over [`Scalar`]: `f32` for training, `f64` as a shadow
//! precision for finite-difference gradient checks (see [`gradcheck`]).

pub mod error;
pub mod gradcheck;
mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::loss::{bce_with_logits_scalar, smooth_l1_scalar};
pub use ops::{sigmoid_scalar, BatchNormOutput, NormMode, Padding};
pub use scalar::Scalar;
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
