//! Metric families on 2-D charts with strictly convex boundary.
//!
//! Every evaluator here is pure: a [`Geometry`] is immutable after construction
//! and can be shared by any number of worker threads. Flow, tensor and
//! tomography code is written against the [`Manifold`] trait so that the same
//! routines run on built-in families and on perturbed metrics `g0 + t h`.

mod boundary;
mod chart;
mod grid_metric;
mod perturbed;
mod config;

use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

pub use boundary::BoundaryParam;
pub use chart::{Chart, CurvePoint};
pub use grid_metric::GridMetric;
pub use perturbed::PerturbedMetric;
pub use config::{FamilySpec, GeometrySpec};

use crate::error::{LensError, Result};
use crate::interp::CENTRAL4;

pub type Point = Vector2<f64>;
pub type Tangent = Vector2<f64>;

/// Metric matrix with its inverse and volume density at a point.
#[derive(Clone, Copy, Debug)]
pub struct MetricAt {
    pub g: Matrix2<f64>,
    pub g_inv: Matrix2<f64>,
    pub sqrt_det: f64,
}

impl MetricAt {
    pub fn new(g: Matrix2<f64>, x: &Point) -> Result<Self> {
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        if !(det > 0.0 && g[(0, 0)] > 0.0) {
            return Err(LensError::NotSpd(x[0], x[1]));
        }
        let g_inv = Matrix2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det;
        Ok(Self { g, g_inv, sqrt_det: det.sqrt() })
    }

    pub fn dot(&self, a: &Tangent, b: &Tangent) -> f64 {
        (a.transpose() * self.g * b)[0]
    }

    pub fn norm(&self, v: &Tangent) -> f64 {
        self.dot(v, v).sqrt()
    }

    /// `g`-orthonormal frame: `e1` along the first coordinate axis, `e2` completing
    /// a positively oriented basis.
    pub fn orthonormal_frame(&self) -> (Tangent, Tangent) {
        let e1 = Tangent::new(1.0 / self.g[(0, 0)].sqrt(), 0.0);
        let mut e2 = Tangent::new(0.0, 1.0);
        e2 -= e1 * self.dot(&e2, &e1);
        let n = self.norm(&e2);
        (e1, e2 / n)
    }

    /// Lower an index: `v^flat_a = g_ab v^b`.
    pub fn flat(&self, v: &Tangent) -> Vector2<f64> {
        self.g * v
    }
}

/// Christoffel symbols `gamma[k][i][j]` = Γ^k_{ij}.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Christoffel(pub [[[f64; 2]; 2]; 2]);

impl Christoffel {
    /// Γ^k_{ij} a^i b^j.
    pub fn bilinear(&self, a: &Tangent, b: &Tangent) -> Tangent {
        let mut out = Tangent::zeros();
        for k in 0..2 {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    acc += self.0[k][i][j] * a[i] * b[j];
                }
            }
            out[k] = acc;
        }
        out
    }

    pub fn quad(&self, v: &Tangent) -> Tangent {
        self.bilinear(v, v)
    }

    /// Levi-Civita symbols from the metric and its coordinate derivatives.
    pub fn from_metric(m: &MetricAt, dg: &[Matrix2<f64>; 2]) -> Self {
        let mut out = [[[0.0; 2]; 2]; 2];
        for (k, row) in out.iter_mut().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for l in 0..2 {
                        acc += m.g_inv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                    }
                    row[i][j] = 0.5 * acc;
                }
            }
        }
        Christoffel(out)
    }

    fn axpy(&mut self, a: f64, other: &Christoffel) {
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    self.0[k][i][j] += a * other.0[k][i][j];
                }
            }
        }
    }
}

/// A point of the unit tangent bundle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Point,
    pub v: Tangent,
}

impl PhasePoint {
    /// Checks `|v|_g = 1` to within `1e-12`.
    pub fn unit<M: Manifold + ?Sized>(m: &M, x: Point, v: Tangent) -> Result<Self> {
        let n = m.metric_at(&x)?.norm(&v);
        if (n - 1.0).abs() > 1e-12 {
            return Err(LensError::InvalidArgument(format!("|v|_g = {n} is not 1")));
        }
        Ok(Self { x, v })
    }

    /// Rescale `v` to unit length.
    pub fn normalized<M: Manifold + ?Sized>(m: &M, x: Point, v: Tangent) -> Result<Self> {
        let n = m.metric_at(&x)?.norm(&v);
        Ok(Self { x, v: v / n })
    }

    /// The flip `(x, v) -> (x, -v)`.
    pub fn flip(&self) -> Self {
        Self { x: self.x, v: -self.v }
    }
}

/// Orthonormal frame of the boundary at arclength `s`.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryFrame {
    pub s: f64,
    pub point: Point,
    pub tangent: Tangent,
    pub nu_in: Tangent,
    /// Second fundamental form with respect to the inward normal.
    pub second_fundamental_form: f64,
}

/// Interface shared by every metric the flow can run on.
pub trait Manifold: Sync {
    fn chart(&self) -> &Chart;

    fn boundary_param(&self) -> &BoundaryParam;

    /// Metric matrix without positivity checks (audits need the raw value).
    fn metric_matrix(&self, x: &Point) -> Result<Matrix2<f64>>;

    /// Metric matrix and its coordinate derivatives `[d_1 g, d_2 g]`.
    fn metric_derivs(&self, x: &Point) -> Result<(Matrix2<f64>, [Matrix2<f64>; 2])>;

    /// Short identifier used to tag datasets.
    fn label(&self) -> String;

    /// Rough upper estimate of the diameter of `M`.
    fn diameter_estimate(&self) -> f64;

    fn metric_at(&self, x: &Point) -> Result<MetricAt> {
        MetricAt::new(self.metric_matrix(x)?, x)
    }

    fn christoffel_at(&self, x: &Point) -> Result<Christoffel> {
        let (g, dg) = self.metric_derivs(x)?;
        Ok(Christoffel::from_metric(&MetricAt::new(g, x)?, &dg))
    }

    /// Conserved angular momentum for rotation-invariant metrics.
    fn clairaut(&self, _y: &PhasePoint) -> Option<f64> {
        None
    }

    /// Coordinate derivatives of the Christoffel symbols, by fourth-order
    /// central differences of [`Manifold::christoffel_at`].
    fn christoffel_derivs(&self, x: &Point) -> Result<[Christoffel; 2]> {
        let step = 1e-3 * self.chart().size();
        let mut out = [Christoffel::default(); 2];
        for (axis, d) in out.iter_mut().enumerate() {
            for &(o, c) in CENTRAL4.iter() {
                let mut xp = *x;
                xp[axis] += o as f64 * step;
                d.axpy(c / step, &self.christoffel_at(&xp)?);
            }
        }
        Ok(out)
    }

    /// Gauss curvature from the Riemann tensor `R^k_{lij}` built out of the
    /// Christoffel symbols and their derivatives.
    fn gauss_curvature_at(&self, x: &Point) -> Result<f64> {
        let m = self.metric_at(x)?;
        let gam = self.christoffel_at(x)?.0;
        let dgam = self.christoffel_derivs(x)?;
        // R^k_{l12} = d_1 Γ^k_{2l} - d_2 Γ^k_{1l} + Γ^k_{1p} Γ^p_{2l} - Γ^k_{2p} Γ^p_{1l}
        let riemann_up = |k: usize, l: usize| {
            let mut r = dgam[0].0[k][1][l] - dgam[1].0[k][0][l];
            for p in 0..2 {
                r += gam[k][0][p] * gam[p][1][l] - gam[k][1][p] * gam[p][0][l];
            }
            r
        };
        // R_{1212} = g_{1k} R^k_{2 12}
        let r1212 = m.g[(0, 0)] * riemann_up(0, 1) + m.g[(0, 1)] * riemann_up(1, 1);
        Ok(r1212 / (m.sqrt_det * m.sqrt_det))
    }

    fn boundary_length(&self) -> f64 {
        self.boundary_param().total_length()
    }

    /// Boundary frame at global arclength `s`.
    fn boundary_frame(&self, s: f64) -> Result<BoundaryFrame> {
        let (comp, u) = self.boundary_param().parameter(s);
        let c = self.chart().curve(comp, u);
        self.frame_at_curve(s, &c)
    }

    #[doc(hidden)]
    fn frame_at_curve(&self, s: f64, c: &CurvePoint) -> Result<BoundaryFrame> {
        let m = self.metric_at(&c.point)?;
        let speed = m.norm(&c.d1);
        let tangent = c.d1 / speed;
        let drho = self.chart().grad_rho(&c.point);
        let raised = m.g_inv * drho;
        let nu_in = raised / drho.dot(&raised).sqrt();
        let gam = self.christoffel_at(&c.point)?;
        let accel = c.d2 + gam.quad(&c.d1);
        let ii = m.dot(&accel, &nu_in) / (speed * speed);
        Ok(BoundaryFrame { s, point: c.point, tangent, nu_in, second_fundamental_form: ii })
    }

    /// Inward unit vector at arclength `s`, angle `theta` from the inward
    /// normal (positive toward the boundary tangent), with its `mu_boundary`
    /// density `cos(theta)` relative to `ds dtheta`.
    fn phase_from_boundary(&self, s: f64, theta: f64) -> Result<(PhasePoint, f64)> {
        if !(theta.abs() < FRAC_PI_2) {
            return Err(LensError::TangentialEntry(theta));
        }
        let f = self.boundary_frame(s)?;
        let (sn, cs) = theta.sin_cos();
        let v = f.nu_in * cs + f.tangent * sn;
        Ok((PhasePoint { x: f.point, v }, cs))
    }

    /// Boundary coordinates `(s, theta)` of a boundary phase point. For outgoing
    /// vectors the angle is measured from the outward normal, for incoming ones
    /// from the inward normal; in both cases positive toward the tangent.
    fn boundary_coordinates(&self, y: &PhasePoint, outgoing: bool) -> Result<(f64, f64)> {
        let (comp, u) = self.chart().locate(&y.x);
        let s = self.boundary_param().arclength(comp, u);
        let c = self.chart().curve(comp, u);
        let f = self.frame_at_curve(s, &c)?;
        let m = self.metric_at(&y.x)?;
        let nu = if outgoing { -f.nu_in } else { f.nu_in };
        let theta = m.dot(&y.v, &f.tangent).atan2(m.dot(&y.v, &nu));
        Ok((s, theta))
    }
}

/// Conformal factor coefficients: `lambda(x) = (1 - |x|^2/R^2) (c + l.x / R)`
/// and `g = exp(2 lambda) Id`. The factor is 1 on the boundary circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ConformalCoefficients {
    pub c: f64,
    #[serde(default)]
    pub linear: [f64; 2],
}

#[derive(Clone, Debug)]
pub enum Family {
    FlatDisk { radius: f64 },
    ConformalDisk { radius: f64, coeffs: ConformalCoefficients },
    HyperbolicCylinder { half_width: f64, circumference: f64 },
    Grid { radius: f64, metric: Arc<GridMetric> },
}

/// A metric family on its (possibly enlarged) chart.
#[derive(Clone, Debug)]
pub struct Geometry {
    family: Family,
    chart: Chart,
    extension_margin: f64,
    boundary: BoundaryParam,
}

impl Geometry {
    pub fn new(family: Family, extension_margin: f64) -> Result<Self> {
        let chart = match &family {
            Family::FlatDisk { radius } | Family::ConformalDisk { radius, .. } | Family::Grid { radius, .. } => {
                Chart::Disk { radius: *radius }
            }
            Family::HyperbolicCylinder { half_width, circumference } => {
                Chart::Strip { half_width: *half_width, circumference: *circumference }
            }
        };
        let size = chart.size();
        if !(size > 0.0) || !(extension_margin >= 0.0) {
            return Err(LensError::Config("chart size must be positive and extension margin non-negative".into()));
        }
        if let Family::Grid { metric, .. } = &family {
            let (lo, hi) = metric.extent();
            let need = size * (1.0 + extension_margin);
            if lo[0] > -need || lo[1] > -need || hi[0] < need || hi[1] < need {
                return Err(LensError::Config("grid metric does not cover the extended chart".into()));
            }
        }
        Self::with_chart(family, chart, extension_margin)
    }

    fn with_chart(family: Family, chart: Chart, extension_margin: f64) -> Result<Self> {
        let mut geom = Geometry {
            family,
            chart,
            extension_margin,
            boundary: BoundaryParam::from_speed(1, TAU, |_, _| 1.0),
        };
        let failure = std::cell::Cell::new(None);
        let boundary = BoundaryParam::from_speed(chart.components(), chart.parameter_period(), |comp, u| {
            let c = chart.curve(comp, u);
            match geom.metric_at(&c.point) {
                Ok(m) => m.norm(&c.d1),
                Err(e) => {
                    let prev = failure.take();
                    failure.set(prev.or(Some(e)));
                    1.0
                }
            }
        });
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        geom.boundary = boundary;
        Ok(geom)
    }

    pub fn flat_disk(radius: f64) -> Self {
        Self::new(Family::FlatDisk { radius }, 0.1).expect("valid flat disk")
    }

    pub fn conformal_disk(radius: f64, c: f64) -> Self {
        Self::new(Family::ConformalDisk { radius, coeffs: ConformalCoefficients { c, linear: [0.0, 0.0] } }, 0.1)
            .expect("valid conformal disk")
    }

    pub fn hyperbolic_cylinder(half_width: f64) -> Self {
        Self::new(Family::HyperbolicCylinder { half_width, circumference: TAU }, 0.1).expect("valid cylinder")
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.extension_margin = margin;
        self
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn extension_margin(&self) -> f64 {
        self.extension_margin
    }

    /// The same closed-form metric evaluated on the chart enlarged by the
    /// extension margin.
    pub fn extended(&self) -> Result<Geometry> {
        Self::with_chart(self.family.clone(), self.chart.enlarged(self.extension_margin), 0.0)
    }

    fn check_domain(&self, x: &Point) -> Result<()> {
        // Evaluators are valid on the extended chart plus a slack that covers
        // integrator overshoot past the boundary.
        let slack = self.chart.size() * (self.extension_margin + 0.25);
        if self.chart.contains_dilated(x, slack) && x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LensError::OutOfChart(x[0], x[1]))
        }
    }

    fn conformal_lambda(radius: f64, k: &ConformalCoefficients, x: &Point) -> (f64, Point) {
        let q = 1.0 - x.norm_squared() / (radius * radius);
        let l = Point::new(k.linear[0], k.linear[1]);
        let p = k.c + l.dot(x) / radius;
        let lambda = q * p;
        let grad = x * (-2.0 * p / (radius * radius)) + l * (q / radius);
        (lambda, grad)
    }
}

impl Manifold for Geometry {
    fn chart(&self) -> &Chart {
        &self.chart
    }

    fn boundary_param(&self) -> &BoundaryParam {
        &self.boundary
    }

    fn metric_matrix(&self, x: &Point) -> Result<Matrix2<f64>> {
        self.check_domain(x)?;
        Ok(match &self.family {
            Family::FlatDisk { .. } => Matrix2::identity(),
            Family::ConformalDisk { radius, coeffs } => {
                let (lambda, _) = Self::conformal_lambda(*radius, coeffs, x);
                Matrix2::identity() * (2.0 * lambda).exp()
            }
            Family::HyperbolicCylinder { .. } => {
                let c = x[0].cosh();
                Matrix2::new(1.0, 0.0, 0.0, c * c)
            }
            Family::Grid { metric, .. } => metric.sample(x)?.0,
        })
    }

    fn metric_derivs(&self, x: &Point) -> Result<(Matrix2<f64>, [Matrix2<f64>; 2])> {
        self.check_domain(x)?;
        Ok(match &self.family {
            Family::FlatDisk { .. } => (Matrix2::identity(), [Matrix2::zeros(); 2]),
            Family::ConformalDisk { radius, coeffs } => {
                let (lambda, grad) = Self::conformal_lambda(*radius, coeffs, x);
                let e = (2.0 * lambda).exp();
                let id = Matrix2::identity();
                (id * e, [id * (2.0 * grad[0] * e), id * (2.0 * grad[1] * e)])
            }
            Family::HyperbolicCylinder { .. } => {
                let c = x[0].cosh();
                (Matrix2::new(1.0, 0.0, 0.0, c * c), [Matrix2::new(0.0, 0.0, 0.0, (2.0 * x[0]).sinh()), Matrix2::zeros()])
            }
            Family::Grid { metric, .. } => metric.sample(x)?,
        })
    }

    fn christoffel_at(&self, x: &Point) -> Result<Christoffel> {
        match &self.family {
            Family::FlatDisk { .. } => {
                self.check_domain(x)?;
                Ok(Christoffel::default())
            }
            Family::HyperbolicCylinder { .. } => {
                self.check_domain(x)?;
                let (s, c) = (x[0].sinh(), x[0].cosh());
                let mut g = [[[0.0; 2]; 2]; 2];
                g[0][1][1] = -c * s;
                g[1][0][1] = s / c;
                g[1][1][0] = s / c;
                Ok(Christoffel(g))
            }
            _ => {
                let (g, dg) = self.metric_derivs(x)?;
                Ok(Christoffel::from_metric(&MetricAt::new(g, x)?, &dg))
            }
        }
    }

    fn label(&self) -> String {
        match &self.family {
            Family::FlatDisk { radius } => format!("flat_disk(R={radius})"),
            Family::ConformalDisk { radius, coeffs } => {
                format!("conformal_disk(R={radius},c={},l={:?})", coeffs.c, coeffs.linear)
            }
            Family::HyperbolicCylinder { half_width, circumference } => {
                format!("hyperbolic_cylinder(a={half_width},L={circumference})")
            }
            Family::Grid { radius, .. } => format!("grid_metric(R={radius})"),
        }
    }

    fn diameter_estimate(&self) -> f64 {
        match self.chart {
            Chart::Strip { half_width, circumference } => 2.0 * half_width + 0.5 * circumference,
            Chart::Disk { radius } => {
                // Longest metric length of a chart diameter over a few directions.
                let rule = gauss_quad::legendre::GaussLegendre::new(16.try_into().unwrap());
                (0..8)
                    .map(|k| {
                        let dir = Point::new((k as f64 * TAU / 16.0).cos(), (k as f64 * TAU / 16.0).sin());
                        rule.integrate(-radius, radius, |t| {
                            self.metric_at(&(dir * t)).map(|m| m.norm(&dir)).unwrap_or(1.0)
                        })
                    })
                    .fold(0.0, f64::max)
            }
        }
    }

    fn clairaut(&self, y: &PhasePoint) -> Option<f64> {
        match &self.family {
            Family::HyperbolicCylinder { .. } => {
                let c = y.x[0].cosh();
                Some(c * c * y.v[1])
            }
            Family::FlatDisk { .. } => Some(y.x[0] * y.v[1] - y.x[1] * y.v[0]),
            Family::ConformalDisk { radius, coeffs } if coeffs.linear == [0.0, 0.0] => {
                let (lambda, _) = Self::conformal_lambda(*radius, coeffs, &y.x);
                Some((2.0 * lambda).exp() * (y.x[0] * y.v[1] - y.x[1] * y.v[0]))
            }
            _ => None,
        }
    }
}

/// Summary of the convexity and positivity checks for a geometry.
#[derive(Clone, Debug, Serialize)]
pub struct ConvexityReport {
    pub min_second_fundamental_form: f64,
    pub curvature_min: f64,
    pub curvature_max: f64,
    pub spd_margin: f64,
    pub samples: usize,
    pub passed: bool,
}

/// Samples the boundary second fundamental form, the interior Gauss curvature
/// and the smallest metric eigenvalue.
pub fn convexity_audit<M: Manifold + ?Sized>(m: &M, n_samples: usize) -> Result<ConvexityReport> {
    if n_samples == 0 {
        return Err(LensError::InvalidArgument("n_samples must be at least 1".into()));
    }
    let len = m.boundary_length();
    let mut min_ii = f64::INFINITY;
    let mut spd = f64::INFINITY;
    for k in 0..n_samples {
        let s = len * (k as f64 + 0.5) / n_samples as f64;
        let (comp, u) = m.boundary_param().parameter(s);
        let c = m.chart().curve(comp, u);
        let raw = m.metric_matrix(&c.point)?;
        spd = spd.min(grid_metric::min_eigenvalue(&[raw[(0, 0)], raw[(0, 1)], raw[(1, 1)]]));
        match m.frame_at_curve(s, &c) {
            Ok(f) => min_ii = min_ii.min(f.second_fundamental_form),
            Err(LensError::NotSpd(..)) => min_ii = min_ii.min(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        }
    }
    // Interior samples on a lattice over the bounding box.
    let (lo, hi) = m.chart().bounding_box();
    let side = (n_samples as f64).sqrt().ceil().max(2.0) as usize;
    let (mut kmin, mut kmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut count = 0;
    for j in 0..side {
        for i in 0..side {
            let x = Point::new(
                lo[0] + (hi[0] - lo[0]) * (i as f64 + 0.5) / side as f64,
                lo[1] + (hi[1] - lo[1]) * (j as f64 + 0.5) / side as f64,
            );
            if m.chart().rho(&x) <= 0.0 {
                continue;
            }
            let raw = m.metric_matrix(&x)?;
            spd = spd.min(grid_metric::min_eigenvalue(&[raw[(0, 0)], raw[(0, 1)], raw[(1, 1)]]));
            if let Ok(k) = m.gauss_curvature_at(&x) {
                kmin = kmin.min(k);
                kmax = kmax.max(k);
            }
            count += 1;
        }
    }
    let passed = min_ii > 0.0 && spd > 0.0;
    Ok(ConvexityReport {
        min_second_fundamental_form: min_ii,
        curvature_min: kmin,
        curvature_max: kmax,
        spd_margin: spd,
        samples: count + n_samples,
        passed,
    })
}

/// Periodic wrap of a chart point into the fundamental domain.
pub fn wrap_point(chart: &Chart, x: &Point) -> Point {
    match *chart {
        Chart::Strip { circumference, .. } => Point::new(x[0], x[1].rem_euclid(circumference)),
        Chart::Disk { .. } => *x,
    }
}
