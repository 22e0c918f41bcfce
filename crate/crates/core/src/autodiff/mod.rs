//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The op set is deliberately small — elementwise arithmetic, matrix
//! products, affine maps, softmax/log/exp, layer normalization, reductions,
//! gather/concat and fused single-head attention — but it is closed over
//! everything the segmentation models and losses in this crate need.
//! Ratios of positive quantities (soft Dice) are expressed as
//! `exp(log a − log b)`, which stays inside the op set and is exact for the
//! smoothed, strictly positive numerators and denominators we feed it.

mod array;
mod bundle;
mod check;
mod graph;
mod kernels;

pub use array::{Array, ArrayError};
pub use bundle::{BundleError, ParamBundle};
pub use check::{grad_check, GradCheckReport, LeafReport, ScalarFn};
pub use graph::{Gradients, Graph, GraphError, GraphResult, NodeId, GATHER_ZERO, LOG_FLOOR};
