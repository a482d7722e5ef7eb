//! Minimal dense-tensor engine with tape-based reverse-mode autodiff.
//!
//! The kernel set is deliberately narrow: exactly what the hybrid renderer's
//! networks, losses and samplers need, each with a hand-written adjoint.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_HEADER};
pub use error::{Result, TensorError};
pub use ops::{sigmoid, softplus, NormKind, NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
pub use tensor::Tensor;
