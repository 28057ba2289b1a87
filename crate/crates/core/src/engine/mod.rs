//! Tensor autodiff engine: kernels, parameter storage, tape and optimizer.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, Init, ParamBuilder, ParamId, ParamSpec, ParamStore};
