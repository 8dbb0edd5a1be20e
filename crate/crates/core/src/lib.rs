//! Numerical core: a small dense tensor with a reverse-mode tape, the
//! scale-aware fusion block built on it, detection losses, and a desk-scale
//! trainer.

pub mod bbox;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod ops;
pub mod sfm;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;

pub use bbox::BBox;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_with, GradCheck};
pub use tape::{Grads, OpKind, Tape, Var};
pub use tensor::Tensor;
