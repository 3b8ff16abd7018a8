//! X-ray transforms of symmetric tensors, adjoints, the normal operator and
//! regularized inversion.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LensError, Result};
use crate::flow::{exit_record, integrate_geodesic, trace_ray, FlowOptions, LensDatum};
use crate::geometry::{Chart, Manifold, PhasePoint, Point, Tangent};
use crate::interp::Axis;
use crate::sparse::{compress, Sparse};
use crate::tensors::{
    components, divergence, h1_norm, DirichletOps, InteriorGrid, Mask, SolveOptions, SymTensorField, TensorField,
};

/// Shape and tracing parameters of a boundary grid.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridLayout {
    pub n_s: usize,
    pub n_theta: usize,
    pub theta_max: f64,
    pub flow: FlowOptions,
}

impl GridLayout {
    pub fn new(n_s: usize, n_theta: usize) -> Self {
        Self { n_s, n_theta, theta_max: FRAC_PI_2 - 1e-3, flow: FlowOptions::default() }
    }

    pub fn with_flow(mut self, flow: FlowOptions) -> Self {
        self.flow = flow;
        self
    }

    pub fn with_theta_max(mut self, theta_max: f64) -> Self {
        self.theta_max = theta_max;
        self
    }
}

/// Cell-centred nodes `(s_i, theta_j)` on the inward boundary with traced exits.
#[derive(Clone, Debug, Serialize)]
pub struct BoundaryGrid {
    pub geometry: String,
    pub layout: GridLayout,
    offsets: Vec<f64>,
    lengths: Vec<f64>,
    per_component: usize,
    nodes: Vec<LensDatum>,
    failed: Vec<bool>,
    weights: Vec<f64>,
}

impl BoundaryGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn delta_theta(&self) -> f64 {
        2.0 * self.layout.theta_max / self.layout.n_theta as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.layout.n_theta + j
    }

    pub fn s_node(&self, i: usize) -> f64 {
        let c = i / self.per_component;
        let local = i % self.per_component;
        self.offsets[c] + local as f64 * self.lengths[c] / self.per_component as f64
    }

    pub fn theta_node(&self, j: usize) -> f64 {
        -self.layout.theta_max + (j as f64 + 0.5) * self.delta_theta()
    }

    pub fn datum(&self, k: usize) -> &LensDatum {
        &self.nodes[k]
    }

    pub fn data(&self) -> &[LensDatum] {
        &self.nodes
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn trapped(&self, k: usize) -> bool {
        self.nodes[k].trapped
    }

    /// Whether the node integration failed.
    pub fn failed(&self, k: usize) -> bool {
        self.failed[k]
    }

    /// Trapped or failed nodes, excluded from all quadratures.
    pub fn masked(&self, k: usize) -> bool {
        self.nodes[k].trapped || self.failed[k]
    }

    pub fn trapped_count(&self) -> usize {
        self.nodes.iter().filter(|d| d.trapped).count()
    }

    /// Exact `integral of cos(theta) ds dtheta` over the covered angles.
    pub fn total_measure(&self) -> f64 {
        2.0 * self.layout.theta_max.sin() * self.offsets.iter().zip(&self.lengths).map(|(_, l)| l).sum::<f64>()
    }

    pub fn same_shape(&self, other: &BoundaryGrid) -> bool {
        self.layout.n_s == other.layout.n_s
            && self.layout.n_theta == other.layout.n_theta
            && self.layout.theta_max == other.layout.theta_max
            && self.lengths.len() == other.lengths.len()
    }

    /// Catmull-Rom interpolation of node values, periodic in `s` on each
    /// boundary component and clamped in `theta`. Masked nodes count as zero.
    pub fn interpolate(&self, values: &[f64], s: f64, theta: f64) -> f64 {
        let total: f64 = self.lengths.iter().sum();
        let s = s.rem_euclid(total);
        let c = self.offsets.iter().rposition(|o| *o <= s).unwrap_or(0);
        let n = self.per_component;
        let sa = Axis::new(0.0, self.lengths[c] / n as f64, n, true);
        let ta = Axis::new(self.theta_node(0), self.delta_theta(), self.layout.n_theta, false);
        let (Some(ss), Some(st)) = (sa.stencil(s - self.offsets[c], false), ta.stencil(theta, true)) else {
            return 0.0;
        };
        let mut acc = 0.0;
        for (a, &i) in ss.index.iter().enumerate() {
            for (b, &j) in st.index.iter().enumerate() {
                let k = self.index(c * n + i, j);
                if !self.masked(k) {
                    acc += ss.weight[a] * st.weight[b] * values[k];
                }
            }
        }
        acc
    }
}

/// Trace every node of a boundary grid. Weights are the exact
/// `integral of cos(theta) dtheta` over each angular cell times `ds`.
pub fn boundary_grid<M: Manifold + ?Sized>(m: &M, layout: GridLayout) -> Result<BoundaryGrid> {
    if layout.n_s < 4 || layout.n_theta < 4 {
        return Err(LensError::InvalidArgument("boundary grid needs n_s, n_theta >= 4".into()));
    }
    if !(layout.theta_max > 0.0 && layout.theta_max < FRAC_PI_2) {
        return Err(LensError::InvalidArgument(format!("theta_max {} outside (0, pi/2)", layout.theta_max)));
    }
    let bp = m.boundary_param();
    let comps = bp.components();
    if layout.n_s % comps != 0 {
        return Err(LensError::InvalidArgument(format!("n_s must be a multiple of the {comps} boundary components")));
    }
    let mut grid = BoundaryGrid {
        geometry: m.label(),
        layout,
        offsets: (0..comps).map(|c| bp.component_offset(c)).collect(),
        lengths: (0..comps).map(|c| bp.component_length(c)).collect(),
        per_component: layout.n_s / comps,
        nodes: Vec::new(),
        failed: Vec::new(),
        weights: Vec::new(),
    };
    let dth = grid.delta_theta();
    let results: Vec<(LensDatum, bool, f64)> = (0..layout.n_s * layout.n_theta)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / layout.n_theta, k % layout.n_theta);
            let (s, th) = (grid.s_node(i), grid.theta_node(j));
            let ds = grid.lengths[i / grid.per_component] / grid.per_component as f64;
            let w = ds * ((th + 0.5 * dth).sin() - (th - 0.5 * dth).sin());
            let traced = m.phase_from_boundary(s, th).and_then(|(y, _)| exit_record(m, &y, &layout.flow));
            match traced {
                Ok(mut d) => {
                    d.s = s;
                    d.theta = th;
                    (d, false, w)
                }
                Err(_) => (LensDatum { s, theta: th, length: 0.0, trapped: false, exit: None, clairaut: None }, true, w),
            }
        })
        .collect();
    for (d, f, w) in results {
        grid.nodes.push(d);
        grid.failed.push(f);
        grid.weights.push(w);
    }
    Ok(grid)
}

/// Values on the nodes of a boundary grid; masked nodes carry no value.
#[derive(Clone, Debug)]
pub struct XRaySamples {
    pub grid: Arc<BoundaryGrid>,
    pub rank: usize,
    pub geometry: String,
    pub values: Vec<Option<f64>>,
}

impl XRaySamples {
    /// Sample a function of `(s, theta)` on the unmasked nodes.
    pub fn from_fn(grid: Arc<BoundaryGrid>, rank: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| (!grid.masked(k)).then(|| f(grid.datum(k).s, grid.datum(k).theta)))
            .collect();
        Self { geometry: grid.geometry.clone(), grid, rank, values }
    }

    /// Values with masked nodes as zero.
    pub fn dense(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(0.0)).collect()
    }

    /// `L^2(mu_boundary)` inner product over unmasked nodes.
    pub fn inner(&self, other: &XRaySamples) -> Result<f64> {
        if !self.grid.same_shape(&other.grid) {
            return Err(LensError::GridMismatch("boundary samples on different grids".into()));
        }
        Ok((0..self.values.len())
            .filter_map(|k| match (self.values[k], other.values[k]) {
                (Some(a), Some(b)) => Some(self.grid.weight(k) * a * b),
                _ => None,
            })
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).map(|v| v.max(0.0).sqrt()).unwrap_or(0.0)
    }

    pub fn axpy(&self, a: f64, other: &XRaySamples) -> Result<XRaySamples> {
        if !self.grid.same_shape(&other.grid) {
            return Err(LensError::GridMismatch("boundary samples on different grids".into()));
        }
        let mut out = self.clone();
        for (o, b) in out.values.iter_mut().zip(&other.values) {
            *o = match (*o, b) {
                (Some(x), Some(y)) => Some(x + a * y),
                _ => None,
            };
        }
        Ok(out)
    }

    /// Root-mean-square of the unmasked values.
    pub fn rms(&self) -> f64 {
        let v: Vec<f64> = self.values.iter().flatten().copied().collect();
        if v.is_empty() {
            return 0.0;
        }
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// Add Gaussian noise of standard deviation `level * rms`. Returns the noisy
    /// samples and the standard deviation used.
    pub fn with_noise(&self, level: f64, seed: u64) -> (XRaySamples, f64) {
        let sigma = level * self.rms();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = self.clone();
        for v in out.values.iter_mut().flatten() {
            *v += sigma * normal.sample(&mut rng);
        }
        (out, sigma)
    }

    /// Rows `s,theta,weight,value,trapped`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["s", "theta", "weight", "value", "trapped"])?;
        for (k, v) in self.values.iter().enumerate() {
            let d = self.grid.datum(k);
            wtr.serialize((d.s, d.theta, self.grid.weight(k), v, d.trapped))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl XRaySamples {
    /// Parse a file written by [`Self::write_csv`]; rows must match the grid nodes in order.
    pub fn read_csv(grid: Arc<BoundaryGrid>, rank: usize, r: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let mut values = Vec::with_capacity(grid.len());
        for rec in rdr.deserialize::<(f64, f64, f64, Option<f64>, bool)>() {
            let (s, th, _, v, _) = rec?;
            let k = values.len();
            if k >= grid.len() {
                return Err(LensError::GridMismatch(format!("more than {} rows", grid.len())));
            }
            let d = grid.datum(k);
            if (d.s - s).abs() > 1e-9 * (1.0 + d.s.abs()) || (d.theta - th).abs() > 1e-9 {
                return Err(LensError::GridMismatch(format!("row {k} at ({s}, {th}) is not node ({}, {})", d.s, d.theta)));
            }
            values.push(if grid.masked(k) { None } else { Some(v.unwrap_or(0.0)) });
        }
        if values.len() != grid.len() {
            return Err(LensError::GridMismatch(format!("{} rows for {} nodes", values.len(), grid.len())));
        }
        Ok(Self { geometry: grid.geometry.clone(), grid, rank, values })
    }
}

/// `I_m h` at every unmasked node of the grid, by integrating `pi_m^* h` along each ray.
pub fn xray_m<M: Manifold + ?Sized>(m: &M, h: &dyn TensorField, grid: &Arc<BoundaryGrid>) -> Result<XRaySamples> {
    let rank = h.rank();
    let integrand = |x: &Point, v: &Tangent| h.pullback(x, v);
    let opts = grid.layout.flow;
    let values = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            if grid.masked(k) {
                return None;
            }
            let d = grid.datum(k);
            let y = m.phase_from_boundary(d.s, d.theta).ok()?.0;
            trace_ray(m, &y, Some(&integrand), &opts).ok().filter(|o| !o.trapped).map(|o| o.integral)
        })
        .collect();
    Ok(XRaySamples { grid: grid.clone(), rank, geometry: m.label(), values })
}

/// Reduced components of `a^{(x) m}` for a covector `a`.
fn power(rank: usize, a: &[f64; 2]) -> [f64; 3] {
    match rank {
        0 => [1.0, 0.0, 0.0],
        1 => [a[0], a[1], 0.0],
        _ => [a[0] * a[0], a[0] * a[1], a[1] * a[1]],
    }
}

/// `I_m^* w` by fiber quadrature: at each node of `mask`, the average of `w`
/// at the backward exit of each direction, times `v_flat^{(x) m}`.
pub fn xray_adjoint_m<M: Manifold + ?Sized>(
    m: &M,
    w: &XRaySamples,
    interior: &Arc<InteriorGrid>,
    n_fiber: usize,
    mask: Mask,
) -> Result<SymTensorField> {
    if n_fiber == 0 {
        return Err(LensError::InvalidArgument("fiber quadrature needs directions".into()));
    }
    let values = w.dense();
    let sel = interior.mask(mask);
    let opts = w.grid.layout.flow;
    let rank = w.rank;
    let data: Vec<[f64; 3]> = (0..interior.len())
        .into_par_iter()
        .map(|k| -> Result<[f64; 3]> {
            if !sel[k] {
                return Ok([0.0; 3]);
            }
            let x = interior.coord(k);
            let mt = m.metric_at(&x)?;
            let (e1, e2) = mt.orthonormal_frame();
            let mut acc = [0.0; 3];
            for q in 0..n_fiber {
                let a = TAU * (q as f64 + 0.5) / n_fiber as f64;
                let v = e1 * a.cos() + e2 * a.sin();
                let back = match trace_ray(m, &PhasePoint { x, v: -v }, None, &opts) {
                    Ok(o) if !o.trapped => o,
                    _ => continue,
                };
                let inward = PhasePoint { x: back.state.x, v: -back.state.v };
                let Ok((s, th)) = m.boundary_coordinates(&inward, false) else { continue };
                let val = w.grid.interpolate(&values, s, th);
                let flat = mt.flat(&v);
                let p = power(rank, &[flat[0], flat[1]]);
                for c in 0..3 {
                    acc[c] += val * p[c];
                }
            }
            Ok(acc.map(|c| c * TAU / n_fiber as f64))
        })
        .collect::<Result<_>>()?;
    SymTensorField::from_data(interior.clone(), rank, data)
}

fn hermite(t: f64, ta: f64, tb: f64, a: &PhasePoint, b: &PhasePoint) -> (Point, Tangent) {
    let h = tb - ta;
    if h <= 0.0 {
        return (a.x, a.v);
    }
    let u = (t - ta) / h;
    let (u2, u3) = (u * u, u * u * u);
    let x = a.x * (2.0 * u3 - 3.0 * u2 + 1.0)
        + a.v * (h * (u3 - 2.0 * u2 + u))
        + b.x * (-2.0 * u3 + 3.0 * u2)
        + b.v * (h * (u3 - u2));
    let v = (a.x - b.x) * ((6.0 * u2 - 6.0 * u) / h)
        + a.v * (3.0 * u2 - 4.0 * u + 1.0)
        + b.v * (3.0 * u2 - 2.0 * u);
    (x, v)
}

/// Forward X-ray transform of stored fields as a sparse matrix: each ray is split
/// into segments of about one grid spacing with two Gauss points each, and the
/// field is interpolated bicubically. The matched adjoint is its exact transpose
/// for the boundary and interior inner products.
#[derive(Clone, Debug)]
pub struct RayOperator {
    interior: Arc<InteriorGrid>,
    boundary: Arc<BoundaryGrid>,
    rank: usize,
    mask: Mask,
    a: Sparse,
    at: Sparse,
}

impl RayOperator {
    /// Columns are restricted to nodes of `mask`.
    pub fn new<M: Manifold + ?Sized>(
        m: &M,
        interior: Arc<InteriorGrid>,
        boundary: Arc<BoundaryGrid>,
        rank: usize,
        mask: Mask,
    ) -> Result<Self> {
        if rank > 2 {
            return Err(LensError::RankUnsupported(rank));
        }
        let (xs, ys) = interior.axes();
        let (xs, ys) = (*xs, *ys);
        let seg = xs.spacing;
        let sel = interior.mask(mask);
        let opts = boundary.layout.flow;
        let rows: Vec<Vec<(usize, f64)>> = (0..boundary.len())
            .into_par_iter()
            .map(|k| -> Result<Vec<(usize, f64)>> {
                if boundary.masked(k) {
                    return Ok(Vec::new());
                }
                let d = boundary.datum(k);
                let (y, _) = m.phase_from_boundary(d.s, d.theta)?;
                let traj = integrate_geodesic(m, &y, d.length, &opts)?;
                let n_seg = (d.length / seg).ceil().max(1.0) as usize;
                let half = 0.5 * d.length / n_seg as f64;
                let off = half / 3f64.sqrt();
                let mut row = Vec::new();
                for q in 0..n_seg {
                    let mid = (2 * q + 1) as f64 * half;
                    for t in [mid - off, mid + off] {
                        let i = traj.times.partition_point(|s| *s <= t).clamp(1, traj.times.len() - 1);
                        let (x, v) = hermite(t, traj.times[i - 1], traj.times[i], &traj.points[i - 1], &traj.points[i]);
                        let (Some(sx), Some(sy)) = (xs.stencil(x[0], false), ys.stencil(x[1], false)) else {
                            continue;
                        };
                        let coef = match rank {
                            0 => [1.0, 0.0, 0.0],
                            1 => [v[0], v[1], 0.0],
                            _ => [v[0] * v[0], 2.0 * v[0] * v[1], v[1] * v[1]],
                        };
                        for (b, &jy) in sy.index.iter().enumerate() {
                            for (a, &ix) in sx.index.iter().enumerate() {
                                let node = jy * xs.n + ix;
                                if !sel[node] {
                                    continue;
                                }
                                let w = half * sx.weight[a] * sy.weight[b];
                                for c in 0..components(rank) {
                                    row.push((3 * node + c, w * coef[c]));
                                }
                            }
                        }
                    }
                }
                compress(&mut row);
                Ok(row)
            })
            .collect::<Result<_>>()?;
        let a = Sparse::from_rows(rows);
        let at = a.transpose(3 * interior.len());
        Ok(Self { interior, boundary, rank, mask, a, at })
    }

    pub fn interior(&self) -> &Arc<InteriorGrid> {
        &self.interior
    }

    pub fn boundary(&self) -> &Arc<BoundaryGrid> {
        &self.boundary
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }

    pub fn nnz(&self) -> usize {
        self.a.nnz()
    }

    fn check(&self, f: &SymTensorField) -> Result<()> {
        if !Arc::ptr_eq(f.grid(), &self.interior) {
            return Err(LensError::GridMismatch("field lives on a different interior grid".into()));
        }
        if f.rank() != self.rank {
            return Err(LensError::RankUnsupported(f.rank()));
        }
        Ok(())
    }

    pub fn forward(&self, f: &SymTensorField) -> Result<XRaySamples> {
        self.check(f)?;
        let x: Vec<f64> = f.data().iter().flatten().copied().collect();
        let y = self.a.apply(&x);
        let values = (0..self.boundary.len()).map(|k| (!self.boundary.masked(k)).then_some(y[k])).collect();
        Ok(XRaySamples {
            grid: self.boundary.clone(),
            rank: self.rank,
            geometry: self.boundary.geometry.clone(),
            values,
        })
    }

    /// The exact adjoint of [`Self::forward`] for the weighted inner products.
    pub fn adjoint(&self, w: &XRaySamples) -> Result<SymTensorField> {
        if !w.grid.same_shape(&self.boundary) {
            return Err(LensError::GridMismatch("samples on a different boundary grid".into()));
        }
        let ww: Vec<f64> = w.dense().iter().enumerate().map(|(k, v)| v * self.boundary.weight(k)).collect();
        let r = self.at.apply(&ww);
        let sel = self.interior.mask(self.mask);
        let data = (0..self.interior.len())
            .map(|k| match self.interior.metric(k) {
                Some(nm) if sel[k] => {
                    let low = crate::tensors::lower(self.rank, &nm.g, &[r[3 * k], r[3 * k + 1], r[3 * k + 2]]);
                    low.map(|c| c / self.interior.weight(k))
                }
                _ => [0.0; 3],
            })
            .collect();
        SymTensorField::from_data(self.interior.clone(), self.rank, data)
    }

    /// `Pi_m f = I_m^* I_m f`.
    pub fn normal(&self, f: &SymTensorField) -> Result<SymTensorField> {
        self.adjoint(&self.forward(f)?)
    }
}

/// Normal operator. With `extension` set, `f` is zero-extended from `M` and the
/// operator must have been built on the extended geometry.
pub fn normal_apply(op: &RayOperator, f: &SymTensorField, extension: bool) -> Result<SymTensorField> {
    if extension {
        op.normal(&f.clone().restrict(Mask::Inside))
    } else {
        op.normal(f)
    }
}

/// Choice of the Tikhonov parameter.
#[derive(Clone, Debug, Serialize)]
pub enum Regularization {
    Fixed(f64),
    /// Largest candidate (relative to the normal-operator scale) whose data misfit
    /// is within `tau * sigma * sqrt(sum of weights)`.
    Discrepancy { sigma: f64, tau: f64, candidates: Vec<f64> },
}

impl Regularization {
    pub fn discrepancy(sigma: f64) -> Self {
        Regularization::Discrepancy {
            sigma,
            tau: 1.0,
            candidates: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InversionOptions {
    pub regularization: Regularization,
    pub tol: f64,
    pub max_iter: usize,
    pub projection: SolveOptions,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            regularization: Regularization::Fixed(0.0),
            tol: 1e-5,
            max_iter: 400,
            projection: SolveOptions { tol: 1e-10, max_iter: 5000 },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InversionReport {
    pub iters: usize,
    pub residual: f64,
    pub l2_error_if_known: Option<f64>,
    pub lambda: f64,
    pub converged: bool,
    /// Weighted data misfit `||I f - data||`.
    pub misfit: f64,
    /// `||D# f|| / ||f||` of the returned field.
    pub divergence_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub field: SymTensorField,
    pub report: InversionReport,
}

struct Solenoidal<'a> {
    op: &'a RayOperator,
    dirichlet: &'a DirichletOps,
    projection: SolveOptions,
}

impl Solenoidal<'_> {
    fn project(&self, f: &SymTensorField) -> Result<SymTensorField> {
        Ok(self.dirichlet.decompose(f, None, self.projection)?.f_s)
    }

    fn inner(&self, a: &SymTensorField, b: &SymTensorField) -> f64 {
        a.inner(b, self.op.mask).unwrap_or(0.0)
    }

    /// Projected CG for `(Pi + lambda) f = b` from `x0`.
    fn cg(&self, b: &SymTensorField, x0: SymTensorField, lambda: f64, tol: f64, max_iter: usize) -> Result<(SymTensorField, usize, f64)> {
        let apply = |p: &SymTensorField| -> Result<SymTensorField> {
            self.project(&self.op.normal(p)?.axpy(lambda, p)?)
        };
        let bn = self.inner(b, b).sqrt();
        if bn == 0.0 {
            return Ok((x0.scaled(0.0), 0, 0.0));
        }
        let mut x = x0;
        let mut r = b.axpy(-1.0, &apply(&x)?)?;
        let mut p = r.clone();
        let mut rr = self.inner(&r, &r);
        let mut res = rr.sqrt() / bn;
        for it in 0..max_iter {
            if res <= tol {
                return Ok((x, it, res));
            }
            let kp = apply(&p)?;
            let pkp = self.inner(&p, &kp);
            if pkp <= 0.0 {
                return Ok((x, it, res));
            }
            let alpha = rr / pkp;
            x = x.axpy(alpha, &p)?;
            r = r.axpy(-alpha, &kp)?;
            let rr_new = self.inner(&r, &r);
            p = r.axpy(rr_new / rr, &p)?;
            rr = rr_new;
            res = rr.sqrt() / bn;
        }
        Ok((x, max_iter, res))
    }
}

/// Reconstruct a solenoidal rank-2 field from X-ray data by projected conjugate
/// gradients on `(Pi_2 + lambda) f = I_2^* data` within `ker D#`.
pub fn invert_cg(
    op: &RayOperator,
    dirichlet: &DirichletOps,
    data: &XRaySamples,
    truth: Option<&SymTensorField>,
    opts: &InversionOptions,
) -> Result<Inversion> {
    if op.rank != 2 || dirichlet.rank() != 1 {
        return Err(LensError::RankUnsupported(op.rank));
    }
    if !Arc::ptr_eq(dirichlet.grid(), &op.interior) {
        return Err(LensError::GridMismatch("Dirichlet operators on a different grid".into()));
    }
    let sol = Solenoidal { op, dirichlet, projection: opts.projection };
    let b = sol.project(&op.adjoint(data)?)?;
    let zero = SymTensorField::zeros(op.interior.clone(), 2)?;
    let misfit_of = |f: &SymTensorField| -> Result<f64> { Ok(op.forward(f)?.axpy(-1.0, data)?.norm()) };
    let (field, iters, residual, lambda) = match &opts.regularization {
        Regularization::Fixed(lambda) => {
            let (f, it, res) = sol.cg(&b, zero, *lambda, opts.tol, opts.max_iter)?;
            (f, it, res, *lambda)
        }
        Regularization::Discrepancy { sigma, tau, candidates } => {
            let bn = sol.inner(&b, &b);
            let scale = if bn > 0.0 { sol.inner(&op.normal(&b)?, &b) / bn } else { 1.0 };
            let total_weight: f64 = (0..op.boundary.len())
                .filter(|k| !op.boundary.masked(*k))
                .map(|k| op.boundary.weight(k))
                .sum();
            let target = tau * sigma * total_weight.sqrt();
            let mut x = zero;
            let mut chosen = None;
            let mut iters = 0;
            for &c in candidates {
                let lambda = c * scale;
                let (f, it, res) = sol.cg(&b, x, lambda, opts.tol, opts.max_iter)?;
                iters += it;
                let mis = misfit_of(&f)?;
                x = f.clone();
                chosen = Some((f, res, lambda));
                if mis <= target {
                    break;
                }
            }
            let (f, res, lambda) = chosen.ok_or_else(|| LensError::InvalidArgument("no candidates".into()))?;
            (f, iters, res, lambda)
        }
    };
    let field = sol.project(&field)?;
    let misfit = misfit_of(&field)?;
    let fnorm = field.norm(op.mask);
    let div = dirichlet.adjoint(&field)?.norm(dirichlet.domain().inside());
    let l2_error_if_known = match truth {
        Some(t) => {
            let tn = t.norm(Mask::Inside);
            Some(field.axpy(-1.0, t)?.norm(Mask::Inside) / if tn > 0.0 { tn } else { 1.0 })
        }
        None => None,
    };
    Ok(Inversion {
        report: InversionReport {
            iters,
            residual,
            l2_error_if_known,
            lambda,
            converged: residual <= opts.tol,
            misfit,
            divergence_ratio: if fnorm > 0.0 { div / fnorm } else { 0.0 },
        },
        field,
    })
}

impl InversionReport {
    /// The JSON report `{iters, residual, l2_error_if_known, lambda}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "iters": self.iters,
            "residual": self.residual,
            "l2_error_if_known": self.l2_error_if_known,
            "lambda": self.lambda,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityRow {
    pub name: String,
    pub l2: f64,
    pub h1_normal: f64,
    pub ratio: f64,
}

/// `||f||_{L^2(M)} / ||Pi_2 E_0 f||_{H^1(M_e)}` for solenoidal trial fields.
/// `op` must act on the extended geometry with columns on the extended support.
pub fn stability_diagnostic(op: &RayOperator, trials: &[(String, &dyn TensorField)]) -> Result<Vec<StabilityRow>> {
    let grid = op.interior.clone();
    trials
        .iter()
        .map(|(name, f)| {
            if f.rank() != 2 {
                return Err(LensError::RankUnsupported(f.rank()));
            }
            let sampled = SymTensorField::sample(grid.clone(), *f, Mask::Support)?;
            let l2 = sampled.norm(Mask::Inside);
            let div = divergence(&sampled)?.norm(Mask::Inside);
            if div > 1e-3 * l2 {
                return Err(LensError::NotSolenoidal(div / l2));
            }
            let pf = normal_apply(op, &sampled, true)?;
            let h1 = h1_norm(&pf, Mask::InsideExt);
            Ok(StabilityRow { name: name.clone(), l2, h1_normal: h1, ratio: l2 / h1 })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightedBound {
    pub weighted_norm: f64,
    pub c0_norm: f64,
    pub ratio: f64,
    pub excluded_nodes: usize,
}

/// Sup over a lattice of interior points of the fiber norm of a rank-2 field.
fn c0_norm<M: Manifold + ?Sized>(m: &M, h: &dyn TensorField) -> Result<f64> {
    let n = 48;
    let mut sup = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let (u, w) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
            let x = match *m.chart() {
                Chart::Disk { radius } => {
                    let r = radius * u;
                    Point::new(r * (TAU * w).cos(), r * (TAU * w).sin())
                }
                Chart::Strip { half_width, circumference } => Point::new(half_width * (2.0 * u - 1.0), circumference * w),
            };
            let g_inv = m.metric_at(&x)?.g_inv;
            let gi = [g_inv[(0, 0)], g_inv[(0, 1)], g_inv[(1, 1)]];
            let c = h.value(&x)?;
            let r = crate::tensors::raise(h.rank(), &gi, &c);
            sup = sup.max((r[0] * c[0] + r[1] * c[1] + r[2] * c[2]).max(0.0).sqrt());
        }
    }
    Ok(sup)
}

/// `||exp(delta l) I_2 h||_{L^2(mu_boundary)}` against `||h||_{C^0}`, for
/// `delta < q_hat / 2`. The angular integral over each cell of `grid` is refined
/// by bisection, as the integrand is singular at the trapped directions.
/// Trapped evaluations contribute zero and are counted.
pub fn weighted_bound_check<M: Manifold + ?Sized>(
    m: &M,
    h: &dyn TensorField,
    delta: f64,
    q_hat: f64,
    grid: &Arc<BoundaryGrid>,
) -> Result<WeightedBound> {
    if delta >= 0.5 * q_hat {
        return Err(LensError::DeltaTooLarge { delta, half_rate: 0.5 * q_hat });
    }
    let opts = grid.layout.flow;
    let integrand = |x: &Point, v: &Tangent| h.pullback(x, v);
    let eval = |s: f64, th: f64| -> Result<Option<f64>> {
        let (y, _) = m.phase_from_boundary(s, th)?;
        let o = trace_ray(m, &y, Some(&integrand), &opts)?;
        Ok((!o.trapped).then(|| ((delta * o.length).exp() * o.integral).powi(2)))
    };
    let half = 0.5 * grid.delta_theta();
    let cells: Vec<(f64, usize)> = (0..grid.len())
        .into_par_iter()
        .map(|k| -> Result<(f64, usize)> {
            let d = grid.datum(k);
            let ds = grid.weight(k) / ((d.theta + half).sin() - (d.theta - half).sin());
            let mut trapped = 0;
            let mut value = |th: f64| -> Result<f64> {
                Ok(eval(d.s, th)?.unwrap_or_else(|| {
                    trapped += 1;
                    0.0
                }))
            };
            let mut stack = vec![(d.theta - half, d.theta + half, value(d.theta)?, 0u32)];
            let mut acc = 0.0;
            while let Some((a, b, fm, depth)) = stack.pop() {
                let c = 0.5 * (a + b);
                let w = |lo: f64, hi: f64| ds * (hi.sin() - lo.sin());
                let (fl, fr) = (value(0.5 * (a + c))?, value(0.5 * (c + b))?);
                let coarse = fm * w(a, b);
                let fine = fl * w(a, c) + fr * w(c, b);
                if depth >= 40 || (fine - coarse).abs() <= 1e-4 * fine.abs() + 1e-12 * w(a, b) {
                    acc += fine;
                } else {
                    stack.push((a, c, fl, depth + 1));
                    stack.push((c, b, fr, depth + 1));
                }
            }
            Ok((acc, trapped))
        })
        .collect::<Result<_>>()?;
    let weighted_norm = cells.iter().map(|c| c.0).sum::<f64>().sqrt();
    let excluded = cells.iter().map(|c| c.1).sum();
    let c0 = c0_norm(m, h)?;
    Ok(WeightedBound { weighted_norm, c0_norm: c0, ratio: weighted_norm / c0, excluded_nodes: excluded })
}

#[cfg(test)]
mod tests;
