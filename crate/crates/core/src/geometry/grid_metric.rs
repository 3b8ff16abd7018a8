//! Metric sampled on a rectangular node array.
//!
//! Values are interpolated bicubically. Node derivatives of the metric come
//! from fourth-order central differences over the node array (one-sided
//! fourth-order stencils on the two outermost rows) and are interpolated with
//! the same kernel, so Christoffel symbols are as smooth as the values.

use std::io::Read;
use std::path::Path;

use nalgebra::Matrix2;

use super::Point;
use crate::error::{LensError, Result};
use crate::interp::Axis;

#[derive(Clone, Debug)]
pub struct GridMetric {
    xs: Axis,
    ys: Axis,
    values: Vec<[f64; 3]>,
    dx: Vec<[f64; 3]>,
    dy: Vec<[f64; 3]>,
}

fn sym(c: [f64; 3]) -> Matrix2<f64> {
    Matrix2::new(c[0], c[1], c[1], c[2])
}

/// Fourth-order derivative of `f` at index `i` along a line of `n` samples.
fn node_derivative(f: &dyn Fn(usize) -> f64, i: usize, n: usize, h: f64) -> f64 {
    if i >= 2 && i + 2 < n {
        (f(i - 2) - 8.0 * f(i - 1) + 8.0 * f(i + 1) - f(i + 2)) / (12.0 * h)
    } else if i == 0 {
        (-25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4)) / (12.0 * h)
    } else if i == 1 {
        (-3.0 * f(0) - 10.0 * f(1) + 18.0 * f(2) - 6.0 * f(3) + f(4)) / (12.0 * h)
    } else if i == n - 1 {
        (25.0 * f(n - 1) - 48.0 * f(n - 2) + 36.0 * f(n - 3) - 16.0 * f(n - 4) + 3.0 * f(n - 5)) / (12.0 * h)
    } else {
        (3.0 * f(n - 1) + 10.0 * f(n - 2) - 18.0 * f(n - 3) + 6.0 * f(n - 4) - f(n - 5)) / (12.0 * h)
    }
}

impl GridMetric {
    /// Node values are stored row-major: index `j * nx + i` for node `(xs[i], ys[j])`.
    pub fn from_nodes(xs: Axis, ys: Axis, values: Vec<[f64; 3]>) -> Result<Self> {
        if xs.n < 5 || ys.n < 5 {
            return Err(LensError::Config("grid metric needs at least 5 nodes per axis".into()));
        }
        if values.len() != xs.n * ys.n {
            return Err(LensError::Config(format!(
                "grid metric has {} values for a {}x{} lattice",
                values.len(),
                xs.n,
                ys.n
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LensError::Config("grid metric contains non-finite entries".into()));
        }
        let (nx, ny) = (xs.n, ys.n);
        let mut dx = vec![[0.0; 3]; nx * ny];
        let mut dy = vec![[0.0; 3]; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                for c in 0..3 {
                    dx[j * nx + i][c] = node_derivative(&|k| values[j * nx + k][c], i, nx, xs.spacing);
                    dy[j * nx + i][c] = node_derivative(&|k| values[k * nx + i][c], j, ny, ys.spacing);
                }
            }
        }
        Ok(Self { xs, ys, values, dx, dy })
    }

    /// Sample a metric function on `nx x ny` nodes covering `[lo, hi]`.
    pub fn from_fn(lo: Point, hi: Point, nx: usize, ny: usize, g: impl Fn(&Point) -> Matrix2<f64>) -> Result<Self> {
        let xs = Axis::new(lo[0], (hi[0] - lo[0]) / (nx - 1) as f64, nx, false);
        let ys = Axis::new(lo[1], (hi[1] - lo[1]) / (ny - 1) as f64, ny, false);
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let m = g(&Point::new(xs.coord(i), ys.coord(j)));
                values.push([m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]]);
            }
        }
        Self::from_nodes(xs, ys, values)
    }

    /// Parse `x,y,g11,g12,g22` rows (with a header line) on a regular lattice.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<[f64; 5]> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(LensError::Config(format!("grid metric row has {} columns, expected 5", rec.len())));
            }
            let mut row = [0.0; 5];
            for (k, field) in rec.iter().enumerate() {
                row[k] = field
                    .parse()
                    .map_err(|_| LensError::Config(format!("cannot parse grid metric value {field:?}")))?;
            }
            rows.push(row);
        }
        let axis_of = |col: usize| -> Result<Axis> {
            let mut v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
            if v.len() < 5 {
                return Err(LensError::Config("grid metric lattice too small".into()));
            }
            let h = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
            if v.iter().enumerate().any(|(k, x)| (x - (v[0] + k as f64 * h)).abs() > 1e-6 * h) {
                return Err(LensError::Config("grid metric nodes are not uniformly spaced".into()));
            }
            Ok(Axis::new(v[0], h, v.len(), false))
        };
        let xs = axis_of(0)?;
        let ys = axis_of(1)?;
        if rows.len() != xs.n * ys.n {
            return Err(LensError::Config(format!(
                "grid metric has {} rows for a {}x{} lattice",
                rows.len(),
                xs.n,
                ys.n
            )));
        }
        let mut values = vec![[f64::NAN; 3]; xs.n * ys.n];
        for r in &rows {
            let i = ((r[0] - xs.origin) / xs.spacing).round() as usize;
            let j = ((r[1] - ys.origin) / ys.spacing).round() as usize;
            values[j * xs.n + i] = [r[2], r[3], r[4]];
        }
        if values.iter().flatten().any(|v| v.is_nan()) {
            return Err(LensError::Config("grid metric lattice has missing nodes".into()));
        }
        Self::from_nodes(xs, ys, values)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x", "y", "g11", "g12", "g22"])?;
        for j in 0..self.ys.n {
            for i in 0..self.xs.n {
                let v = self.values[j * self.xs.n + i];
                wtr.serialize((self.xs.coord(i), self.ys.coord(j), v[0], v[1], v[2]))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Node coordinate range `[lo, hi]`.
    pub fn extent(&self) -> (Point, Point) {
        (
            Point::new(self.xs.origin, self.ys.origin),
            Point::new(self.xs.coord(self.xs.n - 1), self.ys.coord(self.ys.n - 1)),
        )
    }

    /// Overwrite one node value (used to build degenerate fixtures).
    pub fn with_node(mut self, i: usize, j: usize, value: [f64; 3]) -> Result<Self> {
        self.values[j * self.xs.n + i] = value;
        Self::from_nodes(self.xs, self.ys, self.values)
    }

    /// Smallest eigenvalue over all nodes.
    pub fn min_node_eigenvalue(&self) -> f64 {
        self.values.iter().map(|v| min_eigenvalue(v)).fold(f64::INFINITY, f64::min)
    }

    /// Interpolated metric matrix and its coordinate derivatives.
    pub fn sample(&self, x: &Point) -> Result<(Matrix2<f64>, [Matrix2<f64>; 2])> {
        let sx = self.xs.stencil(x[0], false).ok_or(LensError::OutOfChart(x[0], x[1]))?;
        let sy = self.ys.stencil(x[1], false).ok_or(LensError::OutOfChart(x[0], x[1]))?;
        let mut g = [0.0; 3];
        let mut gx = [0.0; 3];
        let mut gy = [0.0; 3];
        for (b, &j) in sy.index.iter().enumerate() {
            for (a, &i) in sx.index.iter().enumerate() {
                let w = sx.weight[a] * sy.weight[b];
                let n = j * self.xs.n + i;
                for c in 0..3 {
                    g[c] += w * self.values[n][c];
                    gx[c] += w * self.dx[n][c];
                    gy[c] += w * self.dy[n][c];
                }
            }
        }
        Ok((sym(g), [sym(gx), sym(gy)]))
    }
}

pub(crate) fn min_eigenvalue(v: &[f64; 3]) -> f64 {
    let tr = v[0] + v[2];
    let det = v[0] * v[2] - v[1] * v[1];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    0.5 * tr - disc
}
