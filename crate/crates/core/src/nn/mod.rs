//! Minimal differentiable tensor machinery used by the networks.

mod adam;
mod gemm;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamSpec, ParamStore};

#[cfg(test)]
mod tests;
