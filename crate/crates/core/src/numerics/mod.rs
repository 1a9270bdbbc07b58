//! Dense arrays, parameters and reverse-mode differentiation.

mod array;
pub(crate) mod bilinear;
mod gradcheck;
mod graph;
mod param;

pub use array::Array;
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, FdReport};
pub use graph::{focal_terms, ConvGeom, Gradients, Graph, LevelTable, Var};
pub use param::{InitSpec, ParamId, ParamStore, Parameter};

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
