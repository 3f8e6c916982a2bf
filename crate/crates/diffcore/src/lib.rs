//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every forward primitive as a node on a tape. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that contributed to
//! it. Trainable arrays live in a [`ParamStore`], which also owns the Adam
//! moments and knows how to fold graph gradients back into its parameters.
//!
//! ```
//! use diffcore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("x", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
//!
//! let mut g = Graph::new();
//! let x = g.param(&store, "x").unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq);
//! let grads = g.backward(loss).unwrap();
//! store.accumulate_grads(&g, &grads).unwrap();
//! assert_eq!(store.grad("x").unwrap().values(), &[2.0, -4.0, 1.0]);
//! ```

mod error;
mod gemm;
mod gradcheck;
mod graph;
mod init;
mod params;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{gradcheck, GradcheckEntry, GradcheckReport};
pub use graph::{Gradients, Graph, Var};
pub use init::Init;
pub use params::{AdamConfig, Param, ParamStore};
pub use tensor::Tensor;
