//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! The primitive set is deliberately small: grouped convolutions (1-D and
//! 2-D, stride 1, `same` padding), batch and layer normalization, affine
//! maps, swish/GELU, axis transposition, pooling and a logits-space binary
//! cross-entropy. Broadcasting exists only for bias terms.
//!
//! Tensors are row-major and generic over [`Real`]; models train in `f32`
//! and gradient checks run in `f64`.
//!
//! ```
//! use kws_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod error;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use real::Real;
pub use tape::{BatchStats, ConvDims, ConvSpec, Tape, Var};
pub use tensor::Tensor;
