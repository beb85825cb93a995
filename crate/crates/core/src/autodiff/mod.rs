//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{
    grad_check, grad_check_with, relative_error, GradCheckReport, ParamCheck, ParamHost, Stencil,
};
pub use graph::{Binary, Graph, NodeId, Unary};
pub use params::{ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;
