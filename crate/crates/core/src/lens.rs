//! Lens data, comparisons, the scattering isometry, the first variation of the
//! length map and the boundary-distance expansion.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LensError, Result};
use crate::flow::{exit_record, trace_ray, FlowOptions, LensDatum};
use crate::geometry::{Chart, Manifold, PerturbedMetric, Point, Tangent};
use crate::tensors::{Components, TensorField};
use crate::xray::{boundary_grid, BoundaryGrid, GridLayout};

/// Lens data on a boundary grid, with the boundary metric sampled at the
/// `s` nodes for identification checks.
#[derive(Clone, Debug)]
pub struct LensDataset {
    pub grid: Arc<BoundaryGrid>,
    pub geometry: String,
    pub boundary_metric: Vec<f64>,
    pub boundary_length: f64,
    pub untrapped_fraction: f64,
}

/// `g(c', c')` at each `s` node, for the chart boundary curve `c`.
fn boundary_metric<M: Manifold + ?Sized>(m: &M, grid: &BoundaryGrid) -> Result<Vec<f64>> {
    let bp = m.boundary_param();
    (0..grid.layout.n_s)
        .map(|i| {
            let (comp, u) = bp.parameter(grid.s_node(i));
            let c = m.chart().curve(comp, u);
            let g = m.metric_matrix(&c.point)?;
            Ok((g * c.d1).dot(&c.d1))
        })
        .collect()
}

impl LensDataset {
    pub fn from_grid<M: Manifold + ?Sized>(m: &M, grid: Arc<BoundaryGrid>) -> Result<Self> {
        let untrapped = (0..grid.len()).filter(|k| !grid.masked(*k)).count();
        Ok(Self {
            boundary_metric: boundary_metric(m, &grid)?,
            geometry: m.label(),
            boundary_length: m.boundary_length(),
            untrapped_fraction: untrapped as f64 / grid.len().max(1) as f64,
            grid,
        })
    }

    pub fn data(&self) -> &[LensDatum] {
        self.grid.data()
    }

    /// Rows `s,theta,ell,s_out,theta_out,trapped`; exit columns are empty for
    /// trapped or failed nodes.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["s", "theta", "ell", "s_out", "theta_out", "trapped"])?;
        for (k, d) in self.data().iter().enumerate() {
            let exit = if self.grid.masked(k) { None } else { d.exit };
            let ell = (!self.grid.failed(k)).then_some(d.length);
            wtr.serialize((d.s, d.theta, ell, exit.map(|e| e.s_out), exit.map(|e| e.theta_out), d.trapped))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Trace the lens data of `m` on a boundary grid.
pub fn lens_dataset<M: Manifold + ?Sized>(m: &M, layout: GridLayout) -> Result<LensDataset> {
    let grid = Arc::new(boundary_grid(m, layout)?);
    LensDataset::from_grid(m, grid)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LensComparison {
    pub sup_length: f64,
    pub l2_length: f64,
    pub sup_exit: f64,
    pub masked: usize,
}

/// Compare two lens datasets node by node. Nodes trapped or failed in either
/// are masked.
pub fn lens_compare(a: &LensDataset, b: &LensDataset) -> Result<LensComparison> {
    let (ga, gb) = (&a.grid, &b.grid);
    if !ga.same_shape(gb) || ga.data().iter().zip(gb.data()).any(|(x, y)| x.s != y.s || x.theta != y.theta) {
        return Err(LensError::GridMismatch("lens datasets use different boundary grids".into()));
    }
    let mismatch = a
        .boundary_metric
        .iter()
        .zip(&b.boundary_metric)
        .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max);
    if mismatch > 1e-9 {
        return Err(LensError::BoundaryMetricMismatch(mismatch));
    }
    let period = a.boundary_length;
    let mut out = LensComparison::default();
    let mut l2 = 0.0;
    for k in 0..ga.len() {
        if ga.masked(k) || gb.masked(k) {
            out.masked += 1;
            continue;
        }
        let (x, y) = (ga.datum(k), gb.datum(k));
        let dl = (x.length - y.length).abs();
        out.sup_length = out.sup_length.max(dl);
        l2 += ga.weight(k) * dl * dl;
        if let (Some(ex), Some(ey)) = (x.exit, y.exit) {
            let ds = (ex.s_out - ey.s_out).rem_euclid(period);
            let ds = ds.min(period - ds);
            out.sup_exit = out.sup_exit.max(ds.max((ex.theta_out - ey.theta_out).abs()));
        }
    }
    out.l2_length = l2.sqrt();
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct IsometryReport {
    pub scattered_norm: f64,
    pub norm: f64,
    pub rel_err: f64,
    pub excluded: usize,
}

/// Compare `||f o S||` on the inward boundary with `||f||` on the outward
/// boundary, both by the grid quadrature. Trapped nodes drop out of the former.
pub fn scattering_isometry_check(grid: &BoundaryGrid, f: impl Fn(f64, f64) -> f64) -> IsometryReport {
    let mut scattered = 0.0;
    let mut plain = 0.0;
    let mut excluded = 0;
    for k in 0..grid.len() {
        let d = grid.datum(k);
        let w = grid.weight(k);
        plain += w * f(d.s, d.theta).powi(2);
        match d.exit.filter(|_| !grid.masked(k)) {
            Some(e) => scattered += w * f(e.s_out, e.theta_out).powi(2),
            None => excluded += 1,
        }
    }
    let (a, b) = (scattered.sqrt(), plain.sqrt());
    IsometryReport { scattered_norm: a, norm: b, rel_err: (a - b).abs() / b.max(f64::MIN_POSITIVE), excluded }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariationalReport {
    pub s: f64,
    pub theta: f64,
    pub length: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

/// First variation of the length map at the node `(s, theta)` for `g0 + t h`,
/// by central differences with step `t_step`.
pub fn variational_check<M: Manifold + ?Sized>(
    m0: &M,
    h: &dyn TensorField,
    s: f64,
    theta: f64,
    t_step: f64,
    opts: &FlowOptions,
) -> Result<VariationalReport> {
    if !(t_step > 0.0) {
        return Err(LensError::InvalidArgument("t_step must be positive".into()));
    }
    let exit = |t: f64| -> Result<LensDatum> {
        let g = PerturbedMetric::new(m0, h, t)?;
        let (y, _) = g.phase_from_boundary(s, theta)?;
        let d = exit_record(&g, &y, opts)?;
        if d.trapped || d.exit.is_none() {
            return Err(LensError::TrappedUnderPerturbation(s, theta));
        }
        Ok(d)
    };
    let (plus, minus) = (exit(t_step)?, exit(-t_step)?);
    let lhs = (plus.length - minus.length) / (2.0 * t_step);
    let (y0, _) = m0.phase_from_boundary(s, theta)?;
    let integrand = |x: &Point, v: &Tangent| h.pullback(x, v);
    let base = trace_ray(m0, &y0, Some(&integrand), opts)?;
    if base.trapped {
        return Err(LensError::TrappedUnderPerturbation(s, theta));
    }
    let (ep, em) = (plus.exit_phase().expect("exit"), minus.exit_phase().expect("exit"));
    let dx = (ep.x - em.x) / (2.0 * t_step);
    let alpha = m0.metric_at(&base.state.x)?.dot(&dx, &base.state.v);
    let rhs = 0.5 * base.integral + alpha;
    Ok(VariationalReport { s, theta, length: base.length, lhs, rhs, abs_err: (lhs - rhs).abs() })
}

/// `eps b(x) (g0 + c)` with `b = q^2 exp(-q) (1 + a cos(k phi + phase))`,
/// `q = rho / width`. Vanishes to second order at the boundary.
pub struct BoundaryBump<'a, M: Manifold + ?Sized> {
    pub base: &'a M,
    pub eps: f64,
    pub width: f64,
    pub amplitude: f64,
    pub mode: f64,
    pub phase: f64,
    pub traceless: [f64; 2],
}

impl<'a, M: Manifold + ?Sized> BoundaryBump<'a, M> {
    pub fn new(base: &'a M, eps: f64, width: f64) -> Self {
        Self { base, eps, width, amplitude: 0.5, mode: 1.0, phase: 0.0, traceless: [0.0, 0.0] }
    }

    /// Angle around the boundary and its gradient.
    fn angle(&self, x: &Point) -> (f64, Point) {
        match *self.base.chart() {
            Chart::Disk { .. } => {
                let r2 = x.norm_squared();
                if r2 < 1e-24 {
                    return (0.0, Point::zeros());
                }
                (x[1].atan2(x[0]), Point::new(-x[1], x[0]) / r2)
            }
            Chart::Strip { circumference, .. } => {
                let k = std::f64::consts::TAU / circumference;
                (k * x[1], Point::new(0.0, k))
            }
        }
    }

    fn profile(&self, x: &Point) -> (f64, Point) {
        let chart = self.base.chart();
        let rho = chart.rho(x);
        if rho <= 0.0 {
            return (0.0, Point::zeros());
        }
        let q = rho / self.width;
        let (phi, dphi) = self.angle(x);
        let arg = self.mode * phi + self.phase;
        let a = 1.0 + self.amplitude * arg.cos();
        let da = -self.amplitude * self.mode * arg.sin();
        let e = (-q).exp();
        let b = q * q * e * a;
        let db = chart.grad_rho(x) * ((2.0 * q - q * q) * e * a / self.width) + dphi * (q * q * e * da);
        (b, db)
    }

    fn tensor(&self, g: &nalgebra::Matrix2<f64>) -> Components {
        let [p, q] = self.traceless;
        [g[(0, 0)] + p, g[(0, 1)] + q, g[(1, 1)] - p]
    }
}

impl<M: Manifold + ?Sized> TensorField for BoundaryBump<'_, M> {
    fn rank(&self) -> usize {
        2
    }

    fn value(&self, x: &Point) -> Result<Components> {
        let (b, _) = self.profile(x);
        if b == 0.0 {
            return Ok([0.0; 3]);
        }
        let t = self.tensor(&self.base.metric_matrix(x)?);
        Ok(t.map(|c| self.eps * b * c))
    }

    fn gradient(&self, x: &Point) -> Result<[Components; 2]> {
        let (b, db) = self.profile(x);
        if b == 0.0 && db == Point::zeros() {
            return Ok([[0.0; 3]; 2]);
        }
        let (g, dg) = self.base.metric_derivs(x)?;
        let t = self.tensor(&g);
        let mut out = [[0.0; 3]; 2];
        for a in 0..2 {
            let dt = [dg[a][(0, 0)], dg[a][(0, 1)], dg[a][(1, 1)]];
            for c in 0..3 {
                out[a][c] = self.eps * (db[a] * t[c] + b * dt[c]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PairResidual {
    pub s0: f64,
    pub s1: f64,
    pub theta: f64,
    pub d0: f64,
    pub xray: f64,
    pub residual: f64,
    pub residual_half: f64,
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DistanceReport {
    pub pairs: Vec<PairResidual>,
    pub passed: usize,
    pub fraction: f64,
}

/// Shooting angle at `s0` whose ray leaves at `s1`. Scans for brackets, then
/// refines with a safeguarded Newton iteration.
fn shoot<M: Manifold + ?Sized>(m: &M, s0: f64, s1: f64, opts: &FlowOptions) -> Result<(f64, f64)> {
    let period = m.boundary_length();
    let comp_of = |s: f64| m.boundary_param().split(s).0;
    let miss = |th: f64| -> Result<Option<(f64, f64)>> {
        let (y, _) = m.phase_from_boundary(s0, th)?;
        let d = exit_record(m, &y, opts)?;
        Ok(match d.exit.filter(|_| !d.trapped) {
            Some(e) if comp_of(e.s_out) == comp_of(s1) => {
                let r = (e.s_out - s1 + 0.5 * period).rem_euclid(period) - 0.5 * period;
                Some((r, d.length))
            }
            _ => None,
        })
    };
    let n = 96;
    let lim = std::f64::consts::FRAC_PI_2 - 1e-3;
    let ths: Vec<f64> = (0..=n).map(|i| -lim + 2.0 * lim * i as f64 / n as f64).collect();
    let vals: Vec<Option<(f64, f64)>> = ths.iter().map(|t| miss(*t)).collect::<Result<_>>()?;
    let mut brackets = Vec::new();
    for i in 0..n {
        if let (Some((a, _)), Some((b, _))) = (vals[i], vals[i + 1]) {
            if a.abs() < 0.25 * period && b.abs() < 0.25 * period && (a == 0.0 || a * b < 0.0) {
                brackets.push((ths[i], ths[i + 1], a));
            }
        }
    }
    match brackets.len() {
        0 => return Err(LensError::InvalidArgument(format!("no geodesic from s = {s0} to s = {s1}"))),
        1 => {}
        k => return Err(LensError::NonuniqueGeodesic(k)),
    }
    let (mut lo, mut hi, mut flo) = brackets[0];
    let mut th = 0.5 * (lo + hi);
    for _ in 0..100 {
        let Some((f, len)) = miss(th)? else {
            return Err(LensError::InvalidArgument("shooting ray left the bracket".into()));
        };
        if f.abs() < 1e-13 || hi - lo < 1e-14 {
            return Ok((th, len));
        }
        if f * flo < 0.0 {
            hi = th;
        } else {
            lo = th;
            flo = f;
        }
        let step = 1e-7;
        let next = match (miss(th + step)?, miss(th - step)?) {
            (Some((a, _)), Some((b, _))) if a != b => th - f * 2.0 * step / (a - b),
            _ => f64::NAN,
        };
        th = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
    }
    Err(LensError::NoConvergence { iterations: 100, residual: hi - lo })
}

/// Residuals `R(h) = d_{g0+h} - d_{g0} - I_2 h / 2` and `R(h/2)` for each
/// boundary pair, with the ratio test `R(h/2)/R(h)` in `[0.15, 0.35]`.
pub fn boundary_distance_residual<M: Manifold + ?Sized>(
    m0: &M,
    h: &dyn TensorField,
    pairs: &[(f64, f64)],
    opts: &FlowOptions,
) -> Result<DistanceReport> {
    let limit = 0.3 * m0.diameter_estimate();
    let full = PerturbedMetric::new(m0, h, 1.0)?;
    let half = PerturbedMetric::new(m0, h, 0.5)?;
    let integrand = |x: &Point, v: &Tangent| h.pullback(x, v);
    let rows: Vec<PairResidual> = pairs
        .par_iter()
        .map(|&(s0, s1)| -> Result<PairResidual> {
            let (theta, d0) = shoot(m0, s0, s1, opts)?;
            if d0 > limit {
                return Err(LensError::NotNearBoundary { distance: d0, limit });
            }
            let (y, _) = m0.phase_from_boundary(s0, theta)?;
            let xray = trace_ray(m0, &y, Some(&integrand), opts)?.integral;
            let residual = shoot(&full, s0, s1, opts)?.1 - d0 - 0.5 * xray;
            let residual_half = shoot(&half, s0, s1, opts)?.1 - d0 - 0.25 * xray;
            let ratio = if residual != 0.0 { residual_half / residual } else { 0.0 };
            Ok(PairResidual {
                s0,
                s1,
                theta,
                d0,
                xray,
                residual,
                residual_half,
                ratio,
                pass: (0.15..=0.35).contains(&ratio),
            })
        })
        .collect::<Result<_>>()?;
    let passed = rows.iter().filter(|r| r.pass).count();
    Ok(DistanceReport { fraction: passed as f64 / rows.len().max(1) as f64, passed, pairs: rows })
}
