//! Sparse stencil operators, the Dirichlet solve and the solenoidal decomposition.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::field::{Components, TensorField};
use super::grid::{components, lower, raise, InteriorGrid, Mask, NodeMetric};
use super::sym::SymTensorField;
use crate::error::{LensError, Result};
use crate::interp::CENTRAL4;
use crate::sparse::{compress, Sparse};

/// Per-node coefficients of `L u_a = C[k][a][b] d_k u_b + E[a][b] u_b`.
type Coefficients = ([[[f64; 3]; 3]; 2], [[f64; 3]; 3]);

fn gamma(m: &NodeMetric, k: usize, i: usize, j: usize) -> f64 {
    m.gamma.0[k][i][j]
}

fn ginv(m: &NodeMetric, i: usize, j: usize) -> f64 {
    m.g_inv[i + j]
}

/// Reduced index of the symmetric pair `(i, j)`.
fn pair(i: usize, j: usize) -> usize {
    i + j
}

fn derivative_coefficients(rank: usize, m: &NodeMetric) -> Coefficients {
    let mut c = [[[0.0; 3]; 3]; 2];
    let mut e = [[0.0; 3]; 3];
    if rank == 0 {
        c[0][0][0] = 1.0;
        c[1][1][0] = 1.0;
    } else {
        c[0][0][0] = 1.0;
        c[0][1][1] = 0.5;
        c[1][1][0] = 0.5;
        c[1][2][1] = 1.0;
        for (a, (i, j)) in [(0, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            for b in 0..2 {
                e[a][b] = -gamma(m, b, i, j);
            }
        }
    }
    (c, e)
}

/// Coefficients of `D* u`, with `rank` the rank of the input `u`.
fn divergence_coefficients(rank: usize, m: &NodeMetric) -> Coefficients {
    let mut c = [[[0.0; 3]; 3]; 2];
    let mut e = [[0.0; 3]; 3];
    if rank == 1 {
        for i in 0..2 {
            for j in 0..2 {
                c[i][0][j] -= ginv(m, i, j);
                for k in 0..2 {
                    e[0][k] += ginv(m, i, j) * gamma(m, k, i, j);
                }
            }
        }
    } else {
        for j in 0..2 {
            for i in 0..2 {
                for k in 0..2 {
                    let gik = ginv(m, i, k);
                    c[k][j][pair(i, j)] -= gik;
                    for l in 0..2 {
                        e[j][pair(l, j)] += gik * gamma(m, l, k, i);
                        e[j][pair(i, l)] += gik * gamma(m, l, k, j);
                    }
                }
            }
        }
    }
    (c, e)
}

fn build(
    grid: &InteriorGrid,
    in_mask: &[bool],
    out_mask: &[bool],
    n_in: usize,
    n_out: usize,
    coef: impl Fn(&NodeMetric) -> Coefficients + Sync,
) -> Sparse {
    let (xs, ys) = grid.axes();
    let steps = [xs.spacing, ys.spacing];
    let rows: Vec<Vec<Vec<(usize, f64)>>> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let mut out = vec![Vec::new(); 3];
            let Some(m) = grid.metric(k).filter(|_| out_mask[k]) else { return out };
            let (c, e) = coef(m);
            for (a, row) in out.iter_mut().enumerate().take(n_out) {
                if in_mask[k] {
                    for b in 0..n_in {
                        if e[a][b] != 0.0 {
                            row.push((3 * k + b, e[a][b]));
                        }
                    }
                }
                for (axis, ck) in c.iter().enumerate() {
                    for b in 0..n_in {
                        if ck[a][b] == 0.0 {
                            continue;
                        }
                        for &(o, w) in CENTRAL4.iter() {
                            let nb = if axis == 0 { grid.neighbor(k, o, 0) } else { grid.neighbor(k, 0, o) };
                            if let Some(nb) = nb.filter(|nb| in_mask[*nb]) {
                                row.push((3 * nb + b, ck[a][b] * w / steps[axis]));
                            }
                        }
                    }
                }
                compress(row);
            }
            out
        })
        .collect();
    Sparse::from_rows(rows.into_iter().flatten())
}

fn flatten(data: &[Components]) -> Vec<f64> {
    data.iter().flatten().copied().collect()
}

fn unflatten(v: &[f64]) -> Vec<Components> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_field(grid: &Arc<InteriorGrid>, f: &SymTensorField, rank: usize) -> Result<()> {
    if !Arc::ptr_eq(grid, f.grid()) {
        return Err(LensError::GridMismatch("field lives on a different grid".into()));
    }
    if f.rank() != rank {
        return Err(LensError::RankUnsupported(f.rank()));
    }
    Ok(())
}

/// Apply a node-free stencil operator to a field, producing the given rank.
fn stencil_apply(op: &Sparse, grid: &Arc<InteriorGrid>, data: &[Components], rank: usize) -> Result<SymTensorField> {
    SymTensorField::from_data(grid.clone(), rank, unflatten(&op.apply(&flatten(data))))
}

/// `D p` from field values on the support, evaluated at inside nodes.
pub fn sym_derivative(p: &SymTensorField) -> Result<SymTensorField> {
    let rank = p.rank();
    if rank > 1 {
        return Err(LensError::RankUnsupported(rank));
    }
    let grid = p.grid();
    let op = build(
        grid,
        grid.mask(Mask::Support),
        grid.mask(Mask::Inside),
        components(rank),
        components(rank + 1),
        |m| derivative_coefficients(rank, m),
    );
    stencil_apply(&op, grid, p.data(), rank + 1)
}

/// `D* u = -tr(nabla u)` from field values on the support, evaluated at inside nodes.
pub fn divergence(u: &SymTensorField) -> Result<SymTensorField> {
    let rank = u.rank();
    if rank == 0 {
        return Err(LensError::RankUnsupported(rank));
    }
    let grid = u.grid();
    let op = build(
        grid,
        grid.mask(Mask::Support),
        grid.mask(Mask::Inside),
        components(rank),
        components(rank - 1),
        |m| divergence_coefficients(rank, m),
    );
    stencil_apply(&op, grid, u.data(), rank - 1)
}

/// Whether operators act on `M` or on the enlarged chart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Domain {
    Base,
    Extended,
}

impl Domain {
    pub fn inside(self) -> Mask {
        match self {
            Domain::Base => Mask::Inside,
            Domain::Extended => Mask::InsideExt,
        }
    }

    pub fn support(self) -> Mask {
        match self {
            Domain::Base => Mask::Support,
            Domain::Extended => Mask::SupportExt,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SolveOptions {
    /// Relative residual target in the weighted norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 5000 }
    }
}

#[derive(Clone, Debug)]
pub struct Solve {
    pub p: SymTensorField,
    pub iterations: usize,
    /// Achieved `||D* D p - rhs|| / ||rhs||`.
    pub residual: f64,
}

/// Dirichlet operators: `D` maps fields vanishing outside the inside mask to the
/// support mask, and `D#` is its adjoint for the weighted inner products.
#[derive(Clone, Debug)]
pub struct DirichletOps {
    grid: Arc<InteriorGrid>,
    domain: Domain,
    rank: usize,
    d: Sparse,
    dt: Sparse,
    diag: Vec<f64>,
}

impl DirichletOps {
    /// Operators for rank-`rank` potentials (0 or 1).
    pub fn new(grid: Arc<InteriorGrid>, rank: usize, domain: Domain) -> Result<Self> {
        if rank > 1 {
            return Err(LensError::RankUnsupported(rank));
        }
        let d = build(
            &grid,
            grid.mask(domain.inside()),
            grid.mask(domain.support()),
            components(rank),
            components(rank + 1),
            |m| derivative_coefficients(rank, m),
        );
        let dt = d.transpose(3 * grid.len());
        let mut diag = vec![0.0; 3 * grid.len()];
        let fiber = |k: usize| -> [[f64; 3]; 3] {
            let m = grid.metric(k).expect("support nodes carry a metric");
            let w = grid.weight(k);
            let mut f = [[0.0; 3]; 3];
            for (a, col) in f.iter_mut().enumerate() {
                let mut e = [0.0; 3];
                e[a] = 1.0;
                *col = raise(rank + 1, &m.g_inv, &e).map(|v| v * w);
            }
            f
        };
        for (col, slot) in diag.iter_mut().enumerate() {
            let entries = dt.ptr[col]..dt.ptr[col + 1];
            let mut acc = 0.0;
            for e1 in entries.clone() {
                let (r1, v1) = (dt.idx[e1], dt.val[e1]);
                let f = fiber(r1 / 3);
                for e2 in entries.clone() {
                    let (r2, v2) = (dt.idx[e2], dt.val[e2]);
                    if r1 / 3 == r2 / 3 {
                        acc += v1 * f[r1 % 3][r2 % 3] * v2;
                    }
                }
            }
            *slot = acc;
        }
        Ok(Self { grid, domain, rank, d, dt, diag })
    }

    pub fn grid(&self) -> &Arc<InteriorGrid> {
        &self.grid
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn weighted(&self, rank: usize, mask: Mask, v: &[f64]) -> Vec<f64> {
        let sel = self.grid.mask(mask);
        let mut out = vec![0.0; v.len()];
        for k in 0..self.grid.len() {
            if sel[k] {
                let m = self.grid.metric(k).expect("masked nodes carry a metric");
                let r = raise(rank, &m.g_inv, &[v[3 * k], v[3 * k + 1], v[3 * k + 2]]);
                let w = self.grid.weight(k);
                for c in 0..components(rank) {
                    out[3 * k + c] = w * r[c];
                }
            }
        }
        out
    }

    fn unweighted(&self, v: &[f64]) -> Vec<f64> {
        let sel = self.grid.mask(self.domain.inside());
        let mut out = vec![0.0; v.len()];
        for k in 0..self.grid.len() {
            if sel[k] {
                let m = self.grid.metric(k).expect("masked nodes carry a metric");
                let r = lower(self.rank, &m.g, &[v[3 * k], v[3 * k + 1], v[3 * k + 2]]);
                let w = self.grid.weight(k);
                for c in 0..components(self.rank) {
                    out[3 * k + c] = r[c] / w;
                }
            }
        }
        out
    }

    fn restrict_input(&self, v: &mut [f64]) {
        let sel = self.grid.mask(self.domain.inside());
        let nc = components(self.rank);
        for k in 0..self.grid.len() {
            for c in 0..3 {
                if !sel[k] || c >= nc {
                    v[3 * k + c] = 0.0;
                }
            }
        }
    }

    fn normal(&self, x: &[f64]) -> Vec<f64> {
        let dx = self.d.apply(x);
        self.dt.apply(&self.weighted(self.rank + 1, self.domain.support(), &dx))
    }

    /// `D p` for `p` restricted to the inside mask.
    pub fn apply(&self, p: &SymTensorField) -> Result<SymTensorField> {
        check_field(&self.grid, p, self.rank)?;
        let mut x = flatten(p.data());
        self.restrict_input(&mut x);
        SymTensorField::from_data(self.grid.clone(), self.rank + 1, unflatten(&self.d.apply(&x)))
    }

    /// Discrete adjoint `D# u` of [`Self::apply`] for the weighted inner products.
    pub fn adjoint(&self, u: &SymTensorField) -> Result<SymTensorField> {
        check_field(&self.grid, u, self.rank + 1)?;
        let wu = self.weighted(self.rank + 1, self.domain.support(), &flatten(u.data()));
        let out = self.unweighted(&self.dt.apply(&wu));
        SymTensorField::from_data(self.grid.clone(), self.rank, unflatten(&out))
    }

    /// Solve `D# D p = rhs` by Jacobi-preconditioned conjugate gradients.
    pub fn solve(&self, rhs: &SymTensorField, x0: Option<&SymTensorField>, opts: SolveOptions) -> Result<Solve> {
        check_field(&self.grid, rhs, self.rank)?;
        let mut r_in = flatten(rhs.data());
        self.restrict_input(&mut r_in);
        let b = self.weighted(self.rank, self.domain.inside(), &r_in);
        let norm_m = |r: &[f64]| dot(r, &self.unweighted(r)).max(0.0).sqrt();
        let b_norm = norm_m(&b);
        let mut x = match x0 {
            Some(f) => {
                check_field(&self.grid, f, self.rank)?;
                flatten(f.data())
            }
            None => vec![0.0; b.len()],
        };
        self.restrict_input(&mut x);
        let finish = |x: Vec<f64>, iterations, residual| -> Result<Solve> {
            Ok(Solve {
                p: SymTensorField::from_data(self.grid.clone(), self.rank, unflatten(&x))?,
                iterations,
                residual,
            })
        };
        if b_norm == 0.0 && x.iter().all(|v| *v == 0.0) {
            return finish(x, 0, 0.0);
        }
        let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
        let ax = self.normal(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let precond = |r: &[f64]| -> Vec<f64> {
            r.iter().zip(&self.diag).map(|(r, d)| if *d > 0.0 { r / d } else { 0.0 }).collect()
        };
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut res = norm_m(&r) / scale;
        for it in 0..opts.max_iter {
            if res <= opts.tol {
                return finish(x, it, res);
            }
            let ap = self.normal(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            z = precond(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..p.len() {
                p[i] = z[i] + beta * p[i];
            }
            res = norm_m(&r) / scale;
        }
        if res <= opts.tol {
            return finish(x, opts.max_iter, res);
        }
        Err(LensError::NoConvergence { iterations: opts.max_iter, residual: res })
    }

    /// Split `f = D p + f_s` with `D# f_s = 0` on the support mask.
    pub fn decompose(&self, f: &SymTensorField, x0: Option<&SymTensorField>, opts: SolveOptions) -> Result<Decomposition> {
        let f = f.clone().restrict(self.domain.support());
        let rhs = self.adjoint(&f)?;
        let sol = self.solve(&rhs, x0, opts)?;
        let dp = self.apply(&sol.p)?;
        let f_s = f.axpy(-1.0, &dp)?;
        Ok(Decomposition { p: sol.p, f_s, iterations: sol.iterations, residual: sol.residual })
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    /// Potential, vanishing outside the inside mask.
    pub p: SymTensorField,
    /// Discretely solenoidal part.
    pub f_s: SymTensorField,
    pub iterations: usize,
    pub residual: f64,
}

/// Dirichlet solve on `M` for a rank-1 right-hand side.
pub fn dirichlet_solve(rhs: &SymTensorField, opts: SolveOptions) -> Result<Solve> {
    DirichletOps::new(rhs.grid().clone(), 1, Domain::Base)?.solve(rhs, None, opts)
}

/// Solenoidal decomposition of a rank-2 field on `M`.
pub fn solenoidal_decompose(f: &SymTensorField, opts: SolveOptions) -> Result<Decomposition> {
    if f.rank() != 2 {
        return Err(LensError::RankUnsupported(f.rank()));
    }
    DirichletOps::new(f.grid().clone(), 1, Domain::Base)?.decompose(f, None, opts)
}

/// Discrete `H^1` norm over a mask: weighted `L^2` norms of the field and of its
/// coordinate derivatives.
pub fn h1_norm(f: &SymTensorField, mask: Mask) -> f64 {
    let grid = f.grid();
    let (xs, ys) = grid.axes();
    let steps = [xs.spacing, ys.spacing];
    let sel = grid.mask(mask);
    let data = f.data();
    let mut acc = 0.0;
    for k in 0..grid.len() {
        if !sel[k] {
            continue;
        }
        let w = grid.weight(k);
        acc += w * grid.fiber_dot(k, f.rank(), &data[k], &data[k]);
        for (axis, h) in steps.iter().enumerate() {
            let mut d = [0.0; 3];
            for &(o, c) in CENTRAL4.iter() {
                let nb = if axis == 0 { grid.neighbor(k, o, 0) } else { grid.neighbor(k, 0, o) };
                if let Some(nb) = nb {
                    for q in 0..3 {
                        d[q] += c * data[nb][q] / h;
                    }
                }
            }
            acc += w * grid.fiber_dot(k, f.rank(), &d, &d);
        }
    }
    acc.max(0.0).sqrt()
}
