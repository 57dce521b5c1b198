//! Dense tensors, reverse-mode automatic differentiation and the neural
//! network primitives used by FGI-Net.
//!
//! Values live on a [`Graph`] tape as [`Var`] handles; layers read their
//! weights from a [`ParamStore`] through a per-forward [`nn::Ctx`].

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod nn;
pub mod ops;
mod param;
mod tensor;

pub use element::Element;
pub use error::{Error, Result};
pub use graph::{Grads, Graph, ScopeGuard, Var};
pub use param::{Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tensor::{strides_of, Tensor};

/// The single seedable generator threaded through init, dropout and data
/// shuffling.
pub type Rng = rand_chacha::ChaCha8Rng;
