//! Structured node grid covering the (extended) chart.

use serde::Serialize;

use crate::error::{LensError, Result};
use crate::geometry::{Chart, Christoffel, Manifold, Point};
use crate::interp::Axis;

/// Ghost node layers beyond the extended chart on non-periodic axes.
const GHOST: usize = 4;
/// Chebyshev dilation of the inside mask that defines the support mask.
const SUPPORT_WIDTH: i64 = 3;

#[derive(Clone, Copy, Debug)]
pub struct NodeMetric {
    pub g: [f64; 3],
    pub g_inv: [f64; 3],
    pub sqrt_det: f64,
    pub gamma: Christoffel,
}

/// Node selections used by operators and inner products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mask {
    /// Nodes strictly inside `M`.
    Inside,
    /// Inside nodes and their neighbourhood of width three.
    Support,
    /// Nodes strictly inside the extended chart.
    InsideExt,
    SupportExt,
}

#[derive(Clone, Debug)]
pub struct InteriorGrid {
    label: String,
    chart: Chart,
    ext_chart: Chart,
    xs: Axis,
    ys: Axis,
    masks: [Vec<bool>; 4],
    metric: Vec<Option<NodeMetric>>,
}

fn dilate(mask: &[bool], nx: usize, ny: usize, periodic_y: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for j in 0..ny {
        for i in 0..nx {
            if !mask[j * nx + i] {
                continue;
            }
            for dj in -SUPPORT_WIDTH..=SUPPORT_WIDTH {
                let jj = j as i64 + dj;
                let jj = if periodic_y {
                    jj.rem_euclid(ny as i64)
                } else if (0..ny as i64).contains(&jj) {
                    jj
                } else {
                    continue;
                };
                for di in -SUPPORT_WIDTH..=SUPPORT_WIDTH {
                    let ii = i as i64 + di;
                    if (0..nx as i64).contains(&ii) {
                        out[jj as usize * nx + ii as usize] = true;
                    }
                }
            }
        }
    }
    out
}

impl InteriorGrid {
    /// `n` nodes across the chart enlarged by `margin`, plus ghost layers.
    pub fn new<M: Manifold + ?Sized>(m: &M, n: usize, margin: f64) -> Result<Self> {
        if n < 8 {
            return Err(LensError::InvalidArgument("interior grid needs at least 8 nodes per axis".into()));
        }
        let chart = *m.chart();
        let ext_chart = chart.enlarged(margin);
        let (xs, ys) = match ext_chart {
            Chart::Disk { radius } => {
                let h = 2.0 * radius / (n - 1) as f64;
                let ax = Axis::new(-radius - GHOST as f64 * h, h, n + 2 * GHOST, false);
                (ax, ax)
            }
            Chart::Strip { half_width, circumference } => {
                let h = 2.0 * half_width / (n - 1) as f64;
                let ny = ((circumference / h).round() as usize).max(8);
                (
                    Axis::new(-half_width - GHOST as f64 * h, h, n + 2 * GHOST, false),
                    Axis::new(0.0, circumference / ny as f64, ny, true),
                )
            }
        };
        let (nx, ny) = (xs.n, ys.n);
        let coord = |k: usize| Point::new(xs.coord(k % nx), ys.coord(k / nx));
        let inside: Vec<bool> = (0..nx * ny).map(|k| chart.rho(&coord(k)) > 0.0).collect();
        let inside_ext: Vec<bool> = (0..nx * ny).map(|k| ext_chart.rho(&coord(k)) > 0.0).collect();
        let mut support = dilate(&inside, nx, ny, ys.periodic);
        let mut support_ext = dilate(&inside_ext, nx, ny, ys.periodic);
        let mut metric = vec![None; nx * ny];
        for k in 0..nx * ny {
            if !(support[k] || support_ext[k]) {
                continue;
            }
            let x = coord(k);
            let node = m.metric_at(&x).and_then(|mt| {
                Ok(NodeMetric {
                    g: [mt.g[(0, 0)], mt.g[(0, 1)], mt.g[(1, 1)]],
                    g_inv: [mt.g_inv[(0, 0)], mt.g_inv[(0, 1)], mt.g_inv[(1, 1)]],
                    sqrt_det: mt.sqrt_det,
                    gamma: m.christoffel_at(&x)?,
                })
            });
            match node {
                Ok(nm) => metric[k] = Some(nm),
                // Ring nodes beyond the metric's domain are dropped from the support.
                Err(_) if !inside_ext[k] => {
                    support[k] = false;
                    support_ext[k] = false;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            label: m.label(),
            chart,
            ext_chart,
            xs,
            ys,
            masks: [inside, support, inside_ext, support_ext],
            metric,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn chart(&self) -> &Chart {
        &self.chart
    }

    pub fn ext_chart(&self) -> &Chart {
        &self.ext_chart
    }

    pub fn axes(&self) -> (&Axis, &Axis) {
        (&self.xs, &self.ys)
    }

    pub fn nx(&self) -> usize {
        self.xs.n
    }

    pub fn ny(&self) -> usize {
        self.ys.n
    }

    pub fn len(&self) -> usize {
        self.xs.n * self.ys.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid spacing along a representative axis.
    pub fn spacing(&self) -> f64 {
        self.xs.spacing
    }

    pub fn cell_area(&self) -> f64 {
        self.xs.spacing * self.ys.spacing
    }

    pub fn coord(&self, k: usize) -> Point {
        Point::new(self.xs.coord(k % self.xs.n), self.ys.coord(k / self.xs.n))
    }

    /// Index of the node offset by `(di, dj)` from node `k`, wrapping the periodic axis.
    pub fn neighbor(&self, k: usize, di: i64, dj: i64) -> Option<usize> {
        let (nx, ny) = (self.xs.n as i64, self.ys.n as i64);
        let i = (k as i64 % nx) + di;
        let j = (k as i64 / nx) + dj;
        if !(0..nx).contains(&i) {
            return None;
        }
        let j = if self.ys.periodic {
            j.rem_euclid(ny)
        } else if (0..ny).contains(&j) {
            j
        } else {
            return None;
        };
        Some((j * nx + i) as usize)
    }

    pub fn mask(&self, m: Mask) -> &[bool] {
        &self.masks[match m {
            Mask::Inside => 0,
            Mask::Support => 1,
            Mask::InsideExt => 2,
            Mask::SupportExt => 3,
        }]
    }

    pub fn count(&self, m: Mask) -> usize {
        self.mask(m).iter().filter(|b| **b).count()
    }

    pub fn metric(&self, k: usize) -> Option<&NodeMetric> {
        self.metric[k].as_ref()
    }

    /// Area weight `sqrt(det g) * cell area` of a node (0 where no metric is cached).
    pub fn weight(&self, k: usize) -> f64 {
        self.metric[k].map(|m| m.sqrt_det * self.cell_area()).unwrap_or(0.0)
    }

    /// Fiber inner product `g^{(m)}(a, b)` at node `k` in reduced components.
    pub fn fiber_dot(&self, k: usize, rank: usize, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let Some(m) = &self.metric[k] else { return 0.0 };
        let r = raise(rank, &m.g_inv, a);
        r[0] * b[0] + r[1] * b[1] + r[2] * b[2]
    }

    /// Weighted `L^2` inner product over a mask.
    pub fn inner(&self, rank: usize, a: &[[f64; 3]], b: &[[f64; 3]], mask: Mask) -> f64 {
        let sel = self.mask(mask);
        let mut acc = 0.0;
        for k in 0..self.len() {
            if sel[k] {
                acc += self.weight(k) * self.fiber_dot(k, rank, &a[k], &b[k]);
            }
        }
        acc
    }
}

/// Apply the fiber metric: returns `R` with `g^{(m)}(a, b) = R . b` in reduced components.
pub fn raise(rank: usize, gi: &[f64; 3], a: &[f64; 3]) -> [f64; 3] {
    let (p, q, d) = (gi[0], gi[1], gi[2]);
    match rank {
        0 => [a[0], 0.0, 0.0],
        1 => [p * a[0] + q * a[1], q * a[0] + d * a[1], 0.0],
        _ => [
            p * p * a[0] + 2.0 * p * q * a[1] + q * q * a[2],
            2.0 * p * q * a[0] + 2.0 * (p * d + q * q) * a[1] + 2.0 * q * d * a[2],
            q * q * a[0] + 2.0 * q * d * a[1] + d * d * a[2],
        ],
    }
}

/// Inverse of [`raise`], using the lowered metric `g`.
pub fn lower(rank: usize, g: &[f64; 3], r: &[f64; 3]) -> [f64; 3] {
    let (p, q, d) = (g[0], g[1], g[2]);
    match rank {
        0 => [r[0], 0.0, 0.0],
        1 => [p * r[0] + q * r[1], q * r[0] + d * r[1], 0.0],
        _ => {
            // Inverse of the symmetric 3x3 fiber matrix for g^{-1} is the fiber matrix
            // for g, with the factor-two entries moved to the middle row and column.
            [
                p * p * r[0] + p * q * r[1] + q * q * r[2],
                p * q * r[0] + 0.5 * (p * d + q * q) * r[1] + q * d * r[2],
                q * q * r[0] + q * d * r[1] + d * d * r[2],
            ]
        }
    }
}

/// Number of independent components of a rank.
pub fn components(rank: usize) -> usize {
    match rank {
        0 => 1,
        1 => 2,
        _ => 3,
    }
}
