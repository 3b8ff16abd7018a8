//! Compressed sparse row matrices with deterministic parallel products.

use rayon::prelude::*;

#[derive(Clone, Debug, Default)]
pub(crate) struct Sparse {
    pub ptr: Vec<usize>,
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl Sparse {
    /// Assemble from rows of `(column, value)` pairs.
    pub fn from_rows(rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut out = Sparse { ptr: vec![0], ..Default::default() };
        for row in rows {
            for (i, v) in row {
                out.idx.push(i);
                out.val.push(v);
            }
            out.ptr.push(out.idx.len());
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .into_par_iter()
            .map(|r| (self.ptr[r]..self.ptr[r + 1]).map(|e| self.val[e] * x[self.idx[e]]).sum())
            .collect()
    }

    pub fn transpose(&self, ncols: usize) -> Sparse {
        let mut count = vec![0usize; ncols + 1];
        for &c in &self.idx {
            count[c + 1] += 1;
        }
        for c in 0..ncols {
            count[c + 1] += count[c];
        }
        let ptr = count.clone();
        let mut fill = count;
        let mut idx = vec![0; self.idx.len()];
        let mut val = vec![0.0; self.idx.len()];
        for r in 0..self.rows() {
            for e in self.ptr[r]..self.ptr[r + 1] {
                let c = self.idx[e];
                idx[fill[c]] = r;
                val[fill[c]] = self.val[e];
                fill[c] += 1;
            }
        }
        Sparse { ptr, idx, val }
    }
}

/// Sort a row by column and merge duplicate entries.
pub(crate) fn compress(row: &mut Vec<(usize, f64)>) {
    row.sort_by_key(|t| t.0);
    row.dedup_by(|x, y| {
        if x.0 == y.0 {
            y.1 += x.1;
            true
        } else {
            false
        }
    });
}
