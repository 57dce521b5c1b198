//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod dropout;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod shape;

pub use conv::{conv2d_output_size, Conv2dOptions};
pub use norm::BatchStats;
pub use pool::{PoolKind, PoolWindow};
pub use shape::GATHER_ZERO;
