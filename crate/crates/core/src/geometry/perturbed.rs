use nalgebra::Matrix2;

use super::{BoundaryParam, Chart, Manifold, Point};
use crate::error::{LensError, Result};
use crate::tensors::TensorField;

/// The metric `g0 + t h` for a symmetric 2-tensor `h`.
///
/// The boundary is parametrized by `g0`-arclength, which agrees with the
/// perturbed arclength whenever `h` vanishes on the boundary.
pub struct PerturbedMetric<'a, B: Manifold + ?Sized> {
    base: &'a B,
    h: &'a dyn TensorField,
    t: f64,
}

impl<'a, B: Manifold + ?Sized> PerturbedMetric<'a, B> {
    pub fn new(base: &'a B, h: &'a dyn TensorField, t: f64) -> Result<Self> {
        if h.rank() != 2 {
            return Err(LensError::RankUnsupported(h.rank()));
        }
        Ok(Self { base, h, t })
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

fn sym(c: [f64; 3]) -> Matrix2<f64> {
    Matrix2::new(c[0], c[1], c[1], c[2])
}

impl<B: Manifold + ?Sized> Manifold for PerturbedMetric<'_, B> {
    fn chart(&self) -> &Chart {
        self.base.chart()
    }

    fn boundary_param(&self) -> &BoundaryParam {
        self.base.boundary_param()
    }

    fn metric_matrix(&self, x: &Point) -> Result<Matrix2<f64>> {
        Ok(self.base.metric_matrix(x)? + sym(self.h.value(x)?) * self.t)
    }

    fn metric_derivs(&self, x: &Point) -> Result<(Matrix2<f64>, [Matrix2<f64>; 2])> {
        let (g, dg) = self.base.metric_derivs(x)?;
        let dh = self.h.gradient(x)?;
        Ok((
            g + sym(self.h.value(x)?) * self.t,
            [dg[0] + sym(dh[0]) * self.t, dg[1] + sym(dh[1]) * self.t],
        ))
    }

    fn label(&self) -> String {
        format!("{} + {} h", self.base.label(), self.t)
    }

    fn diameter_estimate(&self) -> f64 {
        self.base.diameter_estimate()
    }
}
