//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! ```
//! use gatelab_autodiff::{Graph, ParamGroup, Parameter, Tensor};
//!
//! let g_param = Parameter::new("g", ParamGroup::Gate, Tensor::scalar(0.0));
//! let graph = Graph::new();
//! let g = graph.param(&g_param).unwrap();
//! let p = graph.scalar(2.0).unwrap();
//! let gate = graph.sigmoid(g).unwrap();
//! let loss = graph.mul(gate, p).unwrap();
//! let grads = graph.backward(loss).unwrap();
//! assert_eq!(grads.get("g").unwrap().item(), Some(0.5));
//! ```

mod check;
mod error;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use check::{finite_diff_check, FdReport};
pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, Graph, Var};
pub use param::{GradEntry, GradientMap, ParamGroup, Parameter};
pub use tensor::Tensor;
