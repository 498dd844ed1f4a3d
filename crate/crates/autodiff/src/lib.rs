//! Dense reverse-mode differentiation over small `f64` matrices.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its forward
//! value, and [`Graph::backward`] sweeps the tape once in reverse. Parameters
//! live outside the graph in a [`ParamSet`] and are bound into a fresh graph
//! for each forward pass.

mod error;
mod graph;
mod params;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{softmax, Graph, MapDeriv, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
