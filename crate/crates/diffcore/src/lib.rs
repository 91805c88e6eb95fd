//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Scope is deliberately small: 2-D matrix products, a handful of
//! elementwise maps, concatenation/slicing, row gathers for embeddings and
//! reductions. Broadcasting is limited to same-shape and scalar operands;
//! callers tile explicitly with [`Tape::tile_rows`].
//!
//! ```
//! use duq_diff::{ParamId, Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(ParamId(0), Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.param(ParamId(0)).unwrap().item(), Some(6.0));
//! ```

mod error;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use tape::{sigmoid, softplus, Elementwise, Gradients, ParamId, Reduce, Tape, Var};
pub use tensor::Tensor;
