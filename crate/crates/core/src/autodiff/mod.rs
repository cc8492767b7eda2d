//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in creation order. Calling
//! [`Tape::backward`] on a scalar node walks the tape once in reverse,
//! accumulating exact analytic partials into every node that requires a
//! gradient. Operations whose backward rule is not the derivative of their
//! forward (straight-through estimators and friends) are registered through
//! [`CustomOp`].
//!
//! ```
//! use qat_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
