//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every evaluation (define-by-run). Parameters are
//! registered with [`Graph::param`], inputs and frozen values with
//! [`Graph::constant`]; every op appends one node, and [`Graph::backward`]
//! sweeps the tape once in reverse.
//!
//! Two gradient-shaping primitives sit alongside the usual arithmetic:
//! [`Graph::stop_gradient`] (identity forward, zero backward) and
//! [`Graph::tangential`] (identity forward, backward keeps only the component
//! tangent to the unit sphere at each row).

mod graph;
mod optim;
mod tensor;

pub use graph::{tangential_filter, Gradients, Graph, Var, EPS_NORM, UNIT_TOL};
pub use optim::{AdamState, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
