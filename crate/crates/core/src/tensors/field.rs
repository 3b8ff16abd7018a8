//! Pointwise symmetric tensor fields.
//!
//! Components use the reduced layout `[f, 0, 0]`, `[p1, p2, 0]` or
//! `[h11, h12, h22]` for ranks 0, 1 and 2.

use crate::error::{LensError, Result};
use crate::geometry::{Manifold, Point, Tangent};
use crate::interp::CENTRAL4;

pub type Components = [f64; 3];

/// `f_x(v, ..., v)` for a rank `m` reduced component array.
pub fn contract(rank: usize, c: &Components, v: &Tangent) -> f64 {
    match rank {
        0 => c[0],
        1 => c[0] * v[0] + c[1] * v[1],
        _ => c[0] * v[0] * v[0] + 2.0 * c[1] * v[0] * v[1] + c[2] * v[1] * v[1],
    }
}

/// Fourth-order central differences of a component function.
pub fn fd_gradient(f: impl Fn(&Point) -> Result<Components>, x: &Point) -> Result<[Components; 2]> {
    let step = 1e-4;
    let mut out = [[0.0; 3]; 2];
    for (axis, d) in out.iter_mut().enumerate() {
        for &(o, w) in CENTRAL4.iter() {
            let mut xp = *x;
            xp[axis] += o as f64 * step;
            let v = f(&xp)?;
            for c in 0..3 {
                d[c] += w * v[c] / step;
            }
        }
    }
    Ok(out)
}

pub trait TensorField: Sync {
    fn rank(&self) -> usize;

    fn value(&self, x: &Point) -> Result<Components>;

    /// Coordinate derivatives `[d_1 c, d_2 c]`; fourth-order differences by default.
    fn gradient(&self, x: &Point) -> Result<[Components; 2]> {
        fd_gradient(|y| self.value(y), x)
    }

    /// `pi_m^* f (x, v)`.
    fn pullback(&self, x: &Point, v: &Tangent) -> Result<f64> {
        Ok(contract(self.rank(), &self.value(x)?, v))
    }
}

type ValueFn = dyn Fn(&Point) -> Components + Send + Sync;
type GradFn = dyn Fn(&Point) -> [Components; 2] + Send + Sync;

/// Field given by closures, with an optional closed-form gradient.
pub struct FnField {
    rank: usize,
    value: Box<ValueFn>,
    gradient: Option<Box<GradFn>>,
}

impl FnField {
    pub fn new(rank: usize, value: impl Fn(&Point) -> Components + Send + Sync + 'static) -> Result<Self> {
        if rank > 2 {
            return Err(LensError::RankUnsupported(rank));
        }
        Ok(Self { rank, value: Box::new(value), gradient: None })
    }

    pub fn with_gradient(mut self, g: impl Fn(&Point) -> [Components; 2] + Send + Sync + 'static) -> Self {
        self.gradient = Some(Box::new(g));
        self
    }
}

impl TensorField for FnField {
    fn rank(&self) -> usize {
        self.rank
    }

    fn value(&self, x: &Point) -> Result<Components> {
        Ok((self.value)(x))
    }

    fn gradient(&self, x: &Point) -> Result<[Components; 2]> {
        match &self.gradient {
            Some(g) => Ok(g(x)),
            None => fd_gradient(|y| Ok((self.value)(y)), x),
        }
    }
}

/// The metric tensor of a manifold as a rank-2 field.
pub struct MetricField<'a, M: Manifold + ?Sized>(pub &'a M);

impl<M: Manifold + ?Sized> TensorField for MetricField<'_, M> {
    fn rank(&self) -> usize {
        2
    }

    fn value(&self, x: &Point) -> Result<Components> {
        let g = self.0.metric_matrix(x)?;
        Ok([g[(0, 0)], g[(0, 1)], g[(1, 1)]])
    }

    fn gradient(&self, x: &Point) -> Result<[Components; 2]> {
        let (_, dg) = self.0.metric_derivs(x)?;
        Ok(dg.map(|d| [d[(0, 0)], d[(0, 1)], d[(1, 1)]]))
    }
}

/// Pointwise symmetric covariant derivative `D p = sym(nabla p)` of a rank 0 or 1
/// field, evaluated from the field's gradient and the manifold's connection.
pub struct SymDerivative<'a, M: Manifold + ?Sized, F: TensorField + ?Sized> {
    pub manifold: &'a M,
    pub field: &'a F,
}

impl<'a, M: Manifold + ?Sized, F: TensorField + ?Sized> SymDerivative<'a, M, F> {
    pub fn new(manifold: &'a M, field: &'a F) -> Result<Self> {
        if field.rank() > 1 {
            return Err(LensError::RankUnsupported(field.rank()));
        }
        Ok(Self { manifold, field })
    }
}

impl<M: Manifold + ?Sized, F: TensorField + ?Sized> TensorField for SymDerivative<'_, M, F> {
    fn rank(&self) -> usize {
        self.field.rank() + 1
    }

    fn value(&self, x: &Point) -> Result<Components> {
        let d = self.field.gradient(x)?;
        if self.field.rank() == 0 {
            return Ok([d[0][0], d[1][0], 0.0]);
        }
        let p = self.field.value(x)?;
        let gam = self.manifold.christoffel_at(x)?.0;
        let low = |i: usize, j: usize| gam[0][i][j] * p[0] + gam[1][i][j] * p[1];
        Ok([
            d[0][0] - low(0, 0),
            0.5 * (d[0][1] + d[1][0]) - low(0, 1),
            d[1][1] - low(1, 1),
        ])
    }
}

/// Linear combination of fields of equal rank.
pub struct Sum<'a> {
    pub terms: Vec<(f64, &'a dyn TensorField)>,
}

impl TensorField for Sum<'_> {
    fn rank(&self) -> usize {
        self.terms.first().map(|t| t.1.rank()).unwrap_or(0)
    }

    fn value(&self, x: &Point) -> Result<Components> {
        let mut out = [0.0; 3];
        for (a, f) in &self.terms {
            let v = f.value(x)?;
            for c in 0..3 {
                out[c] += a * v[c];
            }
        }
        Ok(out)
    }

    fn gradient(&self, x: &Point) -> Result<[Components; 2]> {
        let mut out = [[0.0; 3]; 2];
        for (a, f) in &self.terms {
            let v = f.gradient(x)?;
            for k in 0..2 {
                for c in 0..3 {
                    out[k][c] += a * v[k][c];
                }
            }
        }
        Ok(out)
    }
}

/// Pointwise divergence `D* u = -tr(nabla u)` of a rank 1 or 2 field.
pub struct Divergence<'a, M: Manifold + ?Sized, F: TensorField + ?Sized> {
    pub manifold: &'a M,
    pub field: &'a F,
}

impl<'a, M: Manifold + ?Sized, F: TensorField + ?Sized> Divergence<'a, M, F> {
    pub fn new(manifold: &'a M, field: &'a F) -> Result<Self> {
        if field.rank() == 0 || field.rank() > 2 {
            return Err(LensError::RankUnsupported(field.rank()));
        }
        Ok(Self { manifold, field })
    }
}

impl<M: Manifold + ?Sized, F: TensorField + ?Sized> TensorField for Divergence<'_, M, F> {
    fn rank(&self) -> usize {
        self.field.rank() - 1
    }

    fn value(&self, x: &Point) -> Result<Components> {
        let u = self.field.value(x)?;
        let d = self.field.gradient(x)?;
        let gam = self.manifold.christoffel_at(x)?.0;
        let gi = self.manifold.metric_at(x)?.g_inv;
        if self.field.rank() == 1 {
            let mut s = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let cov = d[i][j] - gam[0][i][j] * u[0] - gam[1][i][j] * u[1];
                    s -= gi[(i, j)] * cov;
                }
            }
            return Ok([s, 0.0, 0.0]);
        }
        let at = |c: &Components, i: usize, j: usize| c[i + j];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate().take(2) {
            for i in 0..2 {
                for k in 0..2 {
                    let mut cov = at(&d[k], i, j);
                    for l in 0..2 {
                        cov -= gam[l][k][i] * at(&u, l, j) + gam[l][k][j] * at(&u, i, l);
                    }
                    *o -= gi[(i, k)] * cov;
                }
            }
        }
        Ok(out)
    }
}
