//! Dense tensors, a reverse-mode differentiation tape, and Adam.
//!
//! Values live in [`Tensor`]s. A forward pass places parameters and inputs on
//! a [`Tape`] and combines them with the tape's primitive operations; each
//! result is a [`Var`] handle. [`Tape::backward`] walks the recorded
//! operations in reverse and returns [`Gradients`] for every tracked leaf.
//!
//! ```
//! use graphmatch::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod adam;
mod dense;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_params, grad_check_piecewise, relative_error, PiecewiseCheck};
pub use params::{Bound, GradMap, ParamSet};
pub use tape::{Gradients, Tape, Var};
