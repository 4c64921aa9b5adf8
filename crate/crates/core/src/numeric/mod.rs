//! Minimal tensor arithmetic with reverse-mode gradients, Adam, the
//! inverse square-root schedule and seeded random streams.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use graph::{Graph, NodeId};
pub use kernels::AttentionLayout;
pub use optim::{adam_step, inv_sqrt_lr, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::{Rng, Stream};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
