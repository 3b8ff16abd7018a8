//! Symmetric tensor fields stored on an [`InteriorGrid`].

use std::io::{Read, Write};
use std::sync::Arc;

use super::field::{Components, TensorField};
use super::grid::{components, InteriorGrid, Mask};
use crate::error::{LensError, Result};
use crate::geometry::Point;

#[derive(Clone, Debug)]
pub struct SymTensorField {
    grid: Arc<InteriorGrid>,
    rank: usize,
    data: Vec<Components>,
}

const HEADERS: [&[&str]; 3] = [&["x", "y", "f"], &["x", "y", "p1", "p2"], &["x", "y", "h11", "h12", "h22"]];

impl SymTensorField {
    pub fn zeros(grid: Arc<InteriorGrid>, rank: usize) -> Result<Self> {
        if rank > 2 {
            return Err(LensError::RankUnsupported(rank));
        }
        let n = grid.len();
        Ok(Self { grid, rank, data: vec![[0.0; 3]; n] })
    }

    /// Sample a pointwise field on a mask; other nodes are zero.
    pub fn sample(grid: Arc<InteriorGrid>, f: &dyn TensorField, mask: Mask) -> Result<Self> {
        let mut out = Self::zeros(grid, f.rank())?;
        let sel = out.grid.mask(mask).to_vec();
        for (k, slot) in out.data.iter_mut().enumerate() {
            if sel[k] {
                *slot = f.value(&out.grid.coord(k))?;
            }
        }
        Ok(out)
    }

    pub fn from_data(grid: Arc<InteriorGrid>, rank: usize, data: Vec<Components>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(LensError::GridMismatch(format!("{} values for {} nodes", data.len(), grid.len())));
        }
        let mut out = Self::zeros(grid, rank)?;
        out.data = data;
        Ok(out)
    }

    pub fn grid(&self) -> &Arc<InteriorGrid> {
        &self.grid
    }

    pub fn data(&self) -> &[Components] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Components] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Components> {
        self.data
    }

    /// Zero all nodes outside the mask.
    pub fn restrict(mut self, mask: Mask) -> Self {
        let sel = self.grid.mask(mask);
        for (k, v) in self.data.iter_mut().enumerate() {
            if !sel[k] {
                *v = [0.0; 3];
            }
        }
        self
    }

    fn check(&self, other: &Self) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, &other.grid) || self.rank != other.rank {
            return Err(LensError::GridMismatch("fields live on different grids or ranks".into()));
        }
        Ok(())
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Result<Self> {
        self.check(other)?;
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(&other.data) {
            for c in 0..3 {
                o[c] += a * b[c];
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().flatten().for_each(|v| *v *= a);
        out
    }

    pub fn inner(&self, other: &Self, mask: Mask) -> Result<f64> {
        self.check(other)?;
        Ok(self.grid.inner(self.rank, &self.data, &other.data, mask))
    }

    pub fn norm(&self, mask: Mask) -> f64 {
        self.grid.inner(self.rank, &self.data, &self.data, mask).max(0.0).sqrt()
    }

    /// Largest absolute component over a mask.
    pub fn max_abs(&self, mask: Mask) -> f64 {
        let sel = self.grid.mask(mask);
        self.data
            .iter()
            .zip(sel)
            .filter(|(_, s)| **s)
            .flat_map(|(v, _)| v.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(HEADERS[self.rank])?;
        let nc = components(self.rank);
        for (k, v) in self.data.iter().enumerate() {
            let x = self.grid.coord(k);
            let mut row = vec![x[0], x[1]];
            row.extend_from_slice(&v[..nc]);
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parse a file written by [`Self::write_csv`] back onto `grid`.
    pub fn read_csv(grid: Arc<InteriorGrid>, r: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let ncols = rdr.headers()?.len();
        let rank = match ncols {
            3 => 0,
            4 => 1,
            5 => 2,
            n => return Err(LensError::Config(format!("tensor field file has {n} columns"))),
        };
        let (xs, ys) = grid.axes();
        let (xs, ys) = (*xs, *ys);
        let mut out = Self::zeros(grid, rank)?;
        let mut seen = vec![false; out.data.len()];
        for rec in rdr.deserialize::<Vec<f64>>() {
            let row = rec?;
            if row.len() != ncols {
                return Err(LensError::Config("ragged tensor field row".into()));
            }
            let i = ((row[0] - xs.origin) / xs.spacing).round();
            let j = ((row[1] - ys.origin) / ys.spacing).round();
            if i < 0.0 || j < 0.0 || i as usize >= xs.n || j as usize >= ys.n {
                return Err(LensError::GridMismatch(format!("node ({}, {}) is off the grid", row[0], row[1])));
            }
            let k = j as usize * xs.n + i as usize;
            out.data[k][..ncols - 2].copy_from_slice(&row[2..]);
            seen[k] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(LensError::GridMismatch("tensor field file does not cover the grid".into()));
        }
        Ok(out)
    }

    fn interpolate(&self, x: &Point) -> Result<(Components, [Components; 2])> {
        let (xs, ys) = self.grid.axes();
        let sx = xs.stencil(x[0], false).ok_or(LensError::OutOfChart(x[0], x[1]))?;
        let sy = ys.stencil(x[1], false).ok_or(LensError::OutOfChart(x[0], x[1]))?;
        let mut v = [0.0; 3];
        let mut d = [[0.0; 3]; 2];
        for (b, &j) in sy.index.iter().enumerate() {
            for (a, &i) in sx.index.iter().enumerate() {
                let n = &self.data[j * xs.n + i];
                let (w, wx, wy) = (sx.weight[a] * sy.weight[b], sx.dweight[a] * sy.weight[b], sx.weight[a] * sy.dweight[b]);
                for c in 0..3 {
                    v[c] += w * n[c];
                    d[0][c] += wx * n[c];
                    d[1][c] += wy * n[c];
                }
            }
        }
        Ok((v, d))
    }
}

impl TensorField for SymTensorField {
    fn rank(&self) -> usize {
        self.rank
    }

    fn value(&self, x: &Point) -> Result<Components> {
        Ok(self.interpolate(x)?.0)
    }

    fn gradient(&self, x: &Point) -> Result<[Components; 2]> {
        Ok(self.interpolate(x)?.1)
    }
}

/// Symmetrize a full coordinate tensor given as a row-major 2x2 array.
pub fn symmetrize(rank: usize, full: &[f64]) -> Result<Components> {
    match (rank, full.len()) {
        (0, 1) => Ok([full[0], 0.0, 0.0]),
        (1, 2) => Ok([full[0], full[1], 0.0]),
        (2, 4) => Ok([full[0], 0.5 * (full[1] + full[2]), full[3]]),
        (r, _) if r > 2 => Err(LensError::RankUnsupported(r)),
        (r, n) => Err(LensError::InvalidArgument(format!("rank {r} tensor needs {} entries, got {n}", 1 << r))),
    }
}
