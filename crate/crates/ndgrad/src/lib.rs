//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in plain [`Tensor`]s. Computations that need gradients are
//! recorded on a [`Tape`] through [`Var`] handles; [`Tape::backward`] then
//! walks the record in reverse and returns a [`Gradients`] map.
//!
//! ```
//! use ndgrad::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::{NdError, Result};
pub use gradcheck::{finite_difference_check, grad_check, grad_check_many, GradCheckReport};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
