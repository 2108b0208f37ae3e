//! Minimal reverse-mode automatic differentiation over dense `f32`/`f64`
//! tensors, with exactly the operators a small convolutional
//! encoder-decoder needs.
//!
//! ```
//! use jant_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod conv;
mod error;
mod graph;
pub mod init;
mod resample;
mod scalar;
mod tensor;

pub use check::grad_check;
pub use error::{Result, TensorError};
pub use graph::{softmax_channels, CustomOp, Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
