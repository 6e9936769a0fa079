//! Dense `f64` tensors with a reverse-mode gradient tape and spectral-norm
//! estimation.
//!
//! ```
//! use regimenas_tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(&Tensor::scalar(3.0).with_grad());
//! let y = x.mul(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod spectral;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use spectral::{spectral_norm, PowerIterState};
pub use tensor::Tensor;
