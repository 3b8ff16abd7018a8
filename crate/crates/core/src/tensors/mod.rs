//! Symmetric tensor calculus on structured interior grids.

mod field;
mod grid;
mod ops;
mod sym;

pub use field::{
    contract, fd_gradient, Components, Divergence, FnField, MetricField, Sum, SymDerivative, TensorField,
};
pub use grid::{components, lower, raise, InteriorGrid, Mask, NodeMetric};
pub use ops::{
    dirichlet_solve, divergence, h1_norm, solenoidal_decompose, sym_derivative, Decomposition, DirichletOps, Domain,
    Solve, SolveOptions,
};
pub use sym::{symmetrize, SymTensorField};

use crate::error::{LensError, Result};
use crate::geometry::{Manifold, PhasePoint};

/// `pi_m^* h (x, v) = h_x(v, ..., v)` at a unit phase point.
pub fn pullback_m<M: Manifold + ?Sized>(m: &M, h: &dyn TensorField, y: &PhasePoint) -> Result<f64> {
    let norm = m.metric_at(&y.x)?.norm(&y.v);
    if (norm - 1.0).abs() > 1e-9 {
        return Err(LensError::InvalidArgument(format!("pullback needs a unit vector, |v| = {norm}")));
    }
    h.pullback(&y.x, &y.v)
}
