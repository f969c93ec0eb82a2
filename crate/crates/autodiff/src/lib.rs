//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a [`Tape`], register inputs with [`Tape::leaf`], compose ops, then
//! call [`Tape::backward`] on a scalar result:
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use tape::{CustomVjp, Gradients, Tape, Var};
pub use tensor::Tensor;
