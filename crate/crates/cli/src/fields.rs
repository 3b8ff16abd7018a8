use std::f64::consts::TAU;

use lensrig_core::geometry::{Chart, Geometry, Manifold, Point};
use lensrig_core::tensors::{Components, FnField, MetricField, SymDerivative, TensorField};
use lensrig_core::Result;

use crate::config::FieldSpec;
use crate::error::CliError;

/// A built-in field evaluated on a geometry.
pub struct Builtin<'a> {
    spec: FieldSpec,
    geom: &'a Geometry,
    potential: FnField,
}

impl<'a> Builtin<'a> {
    pub fn new(spec: FieldSpec, geom: &'a Geometry) -> Result<Self, CliError> {
        let polar = matches!(spec, FieldSpec::Holomorphic { .. } | FieldSpec::HolomorphicPlusMetric { .. });
        if polar && !matches!(geom.chart(), Chart::Disk { .. }) {
            return Err(CliError::Config("holomorphic fields need a disk chart".into()));
        }
        Ok(Self { spec, geom, potential: boundary_vanishing(geom) })
    }
}

/// `rho^2 (1 + u/2 - 3v/10, 2uv/5 - 1/5)`, zero to second order on the boundary.
/// On a strip `v` is a periodic function of the angle coordinate.
pub fn boundary_vanishing(geom: &Geometry) -> FnField {
    let chart = *geom.chart();
    FnField::new(1, move |x| {
        let w = chart.rho(x).max(0.0).powi(2);
        let (u, v) = match chart {
            Chart::Disk { .. } => (x[0], x[1]),
            Chart::Strip { circumference, .. } => {
                let a = TAU * x[1] / circumference;
                (x[0], a.sin() + 0.5 * a.cos())
            }
        };
        [w * (1.0 + 0.5 * u - 0.3 * v), w * (0.4 * u * v - 0.2), 0.0]
    })
    .expect("rank 1")
}

fn holomorphic(k: i32, x: &Point) -> Components {
    let r = x.norm().powi(k);
    let a = k as f64 * x[1].atan2(x[0]);
    let (re, im) = (r * a.cos(), r * a.sin());
    [re, -im, -re]
}

impl TensorField for Builtin<'_> {
    fn rank(&self) -> usize {
        self.spec.rank()
    }

    fn value(&self, x: &Point) -> Result<Components> {
        match self.spec {
            FieldSpec::Zero { .. } => Ok([0.0; 3]),
            FieldSpec::One => Ok([1.0, 0.0, 0.0]),
            FieldSpec::Metric => MetricField(self.geom).value(x),
            FieldSpec::Holomorphic { k } => Ok(holomorphic(k, x)),
            FieldSpec::HolomorphicPlusMetric { k } => {
                let (h, g) = (holomorphic(k, x), MetricField(self.geom).value(x)?);
                Ok([h[0] + g[0], h[1] + g[1], h[2] + g[2]])
            }
            FieldSpec::Potential => SymDerivative::new(self.geom, &self.potential)?.value(x),
        }
    }
}
