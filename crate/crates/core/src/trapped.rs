//! Escape-time statistics, escape-rate fits and Santaló quadrature.

use std::f64::consts::TAU;
use std::io::Write;

use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LensError, Result};
use crate::flow::{trace_ray, FlowOptions, Integrand};
use crate::geometry::{Chart, Manifold, PhasePoint, Point, Tangent};

pub use crate::flow::escape_times;

/// Unit vector at fiber angle `alpha` in the metric-orthonormal frame at `x`.
fn fiber_vector<M: Manifold + ?Sized>(m: &M, x: &Point, alpha: f64) -> Result<Tangent> {
    let (e1, e2) = m.metric_at(x)?.orthonormal_frame();
    Ok(e1 * alpha.cos() + e2 * alpha.sin())
}

/// Bounding box of the chart and a bound on the area density over it.
fn proposal_box<M: Manifold + ?Sized>(m: &M) -> Result<(Point, Point, f64)> {
    let chart = m.chart();
    let (lo, hi) = chart.bounding_box();
    let n = 160;
    let mut max = 0.0f64;
    for j in 0..=n {
        for i in 0..=n {
            let x = Point::new(
                lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64,
                lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64,
            );
            if chart.rho(&x) >= 0.0 {
                max = max.max(m.metric_at(&x)?.sqrt_det);
            }
        }
    }
    Ok((lo, hi, 1.25 * max))
}

/// Forward escape times of points drawn from the normalized Liouville measure.
#[derive(Clone, Debug, Serialize)]
pub struct LiouvilleSample {
    pub seed: u64,
    /// Forward escape time per accepted sample; trapped samples hold `t_cap`.
    pub tau: Vec<f64>,
    /// Total rejection-sampling proposals.
    pub proposals: u64,
    /// `box area * density bound * 2 pi`: Liouville measure per proposal.
    pub scale: f64,
    pub t_cap: f64,
}

impl LiouvilleSample {
    /// Draw `n` points; sample `i` uses its own stream derived from `(seed, i)`.
    pub fn draw<M: Manifold + ?Sized>(m: &M, n: usize, seed: u64, opts: &FlowOptions) -> Result<Self> {
        if n == 0 {
            return Err(LensError::InvalidArgument("need at least one sample".into()));
        }
        let (lo, hi, bound) = proposal_box(m)?;
        let chart = *m.chart();
        let draws: Vec<(f64, u64)> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<(f64, u64)> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut tries = 0u64;
                let x = loop {
                    tries += 1;
                    let x = Point::new(rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]));
                    let u: f64 = rng.random();
                    if chart.rho(&x) > 0.0 {
                        let w = m.metric_at(&x)?.sqrt_det;
                        if w > bound {
                            return Err(LensError::InvalidArgument(
                                "area density exceeds the rejection bound".into(),
                            ));
                        }
                        if u * bound < w {
                            break x;
                        }
                    }
                };
                let alpha = rng.random_range(0.0..TAU);
                let y = PhasePoint { x, v: fiber_vector(m, &x, alpha)? };
                let out = trace_ray(m, &y, None, opts)?;
                Ok((out.length, tries))
            })
            .collect::<Result<_>>()?;
        let proposals = draws.iter().map(|d| d.1).sum();
        let scale = (hi[0] - lo[0]) * (hi[1] - lo[1]) * bound * TAU;
        Ok(Self { seed, tau: draws.into_iter().map(|d| d.0).collect(), proposals, scale, t_cap: opts.t_cap })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Monte-Carlo estimate and standard error of `integral of g(tau) dmu`.
    fn estimate(&self, g: impl Fn(f64) -> f64) -> (f64, f64) {
        let n = self.proposals as f64;
        let (s1, s2) = self.tau.iter().fold((0.0, 0.0), |(a, b), &t| {
            let v = g(t);
            (a + v, b + v * v)
        });
        let mean = s1 / n;
        let var = (s2 / n - mean * mean).max(0.0);
        (self.scale * mean, self.scale * (var / n).sqrt())
    }

    /// Estimated Liouville volume of the unit tangent bundle.
    pub fn volume(&self) -> (f64, f64) {
        self.estimate(|_| 1.0)
    }

    pub fn trapped_count(&self) -> usize {
        self.tau.iter().filter(|t| **t >= self.t_cap).count()
    }

    /// `mu(tau > t)` on the given times.
    pub fn curve(&self, times: &[f64]) -> Result<EscapeCurve> {
        if times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
            return Err(LensError::InvalidArgument("escape curve times must increase".into()));
        }
        let mut sorted = self.tau.clone();
        sorted.sort_by(f64::total_cmp);
        let n = self.proposals as f64;
        let mut mu_hat = Vec::with_capacity(times.len());
        let mut stderr = Vec::with_capacity(times.len());
        let mut hits = Vec::with_capacity(times.len());
        for &t in times {
            let count = sorted.len() - sorted.partition_point(|v| *v <= t);
            let p = count as f64 / n;
            mu_hat.push(self.scale * p);
            stderr.push(self.scale * (p * (1.0 - p) / n).sqrt());
            hits.push(count);
        }
        Ok(EscapeCurve {
            times: times.to_vec(),
            mu_hat,
            stderr,
            hits,
            n_samples: self.len(),
            seed: self.seed,
        })
    }

    /// Empirical `integral of min(tau, t_cap)^p dmu` with its standard error.
    pub fn moment(&self, p: u32) -> (f64, f64) {
        self.estimate(|t| t.powi(p as i32))
    }
}

/// Volume of the set of phase points with forward escape time above `t`.
#[derive(Clone, Debug, Serialize)]
pub struct EscapeCurve {
    pub times: Vec<f64>,
    pub mu_hat: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Samples with `tau > t` at each time.
    pub hits: Vec<usize>,
    pub n_samples: usize,
    pub seed: u64,
}

impl EscapeCurve {
    /// Rows `t,mu_hat,stderr`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "mu_hat", "stderr"])?;
        for k in 0..self.times.len() {
            wtr.serialize((self.times[k], self.mu_hat[k], self.stderr[k]))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn trapped_volume_curve<M: Manifold + ?Sized>(
    m: &M,
    times: &[f64],
    n_samples: usize,
    seed: u64,
    opts: &FlowOptions,
) -> Result<EscapeCurve> {
    LiouvilleSample::draw(m, n_samples, seed, opts)?.curve(times)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum FitWindow {
    /// Largest window past `transient` with at least `min_hits` samples per time.
    Auto { transient: f64, min_hits: usize },
    Fixed { t0: f64, t1: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    #[serde(rename = "Q_hat")]
    pub q_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub window: [f64; 2],
    /// `ln C` in `mu = C exp(-Q t)`.
    pub log_prefactor: f64,
    pub points: usize,
}

impl FitReport {
    /// The JSON report `{Q_hat, ci_lo, ci_hi, window}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "Q_hat": self.q_hat,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "window": self.window,
        })
    }

    /// Bound `C exp(-Q t)` on the volume with escape time above `t`.
    pub fn tail(&self, t: f64) -> f64 {
        (self.log_prefactor - self.q_hat * t).exp()
    }
}

/// Weighted least-squares slope of `ln mu_hat` against `t`, with a 95% interval.
pub fn escape_rate_fit(curve: &EscapeCurve, window: FitWindow) -> Result<FitReport> {
    let usable = |k: usize| curve.mu_hat[k] > 0.0 && curve.stderr[k] > 0.0;
    let idx: Vec<usize> = match window {
        FitWindow::Fixed { t0, t1 } => {
            (0..curve.times.len()).filter(|&k| curve.times[k] >= t0 && curve.times[k] <= t1 && usable(k)).collect()
        }
        FitWindow::Auto { transient, min_hits } => (0..curve.times.len())
            .filter(|&k| curve.times[k] >= transient)
            .take_while(|&k| curve.hits[k] >= min_hits && usable(k))
            .collect(),
    };
    if idx.len() < 3 {
        return Err(LensError::InsufficientDecade);
    }
    let first = idx[0];
    let last = idx[idx.len() - 1];
    if curve.mu_hat[first] < 10.0 * curve.mu_hat[last] {
        return Err(LensError::InsufficientDecade);
    }
    let (mut sw, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &k in &idx {
        let rel = curve.stderr[k] / curve.mu_hat[k];
        let w = 1.0 / (rel * rel);
        let (t, y) = (curve.times[k], curve.mu_hat[k].ln());
        sw += w;
        st += w * t;
        sy += w * y;
        stt += w * t * t;
        sty += w * t * y;
    }
    let det = sw * stt - st * st;
    let slope = (sw * sty - st * sy) / det;
    let intercept = (stt * sy - st * sty) / det;
    // Points share samples, so the independent-error interval is inflated by the
    // residual scatter when the fit is poor.
    let chi2: f64 = idx
        .iter()
        .map(|&k| {
            let rel = curve.stderr[k] / curve.mu_hat[k];
            let r = curve.mu_hat[k].ln() - (intercept + slope * curve.times[k]);
            (r / rel).powi(2)
        })
        .sum();
    let dof = (idx.len() - 2).max(1) as f64;
    let se = (sw / det).sqrt() * (chi2 / dof).max(1.0).sqrt();
    let q = -slope;
    Ok(FitReport {
        q_hat: q,
        ci_lo: q - 1.96 * se,
        ci_hi: q + 1.96 * se,
        window: [curve.times[first], curve.times[last]],
        log_prefactor: intercept,
        points: idx.len(),
    })
}

/// Bound on `integral of (tau^p - min(tau, T)^p) dmu` from the fitted decay.
pub fn moment_truncation_bound(fit: &FitReport, p: u32, t_cap: f64) -> f64 {
    // p * integral_T^inf t^(p-1) C e^(-Q t) dt, in closed form for p = 1, 2.
    let q = fit.q_hat;
    let tail = fit.tail(t_cap);
    match p {
        0 => 0.0,
        1 => tail / q,
        2 => 2.0 * tail * (t_cap / q + 1.0 / (q * q)),
        _ => f64::NAN,
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SantaloQuadrature {
    pub n_s: usize,
    pub n_theta: usize,
    /// Interior nodes per dimension (Gauss in the normal direction).
    pub n_interior: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SantaloReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
    /// Interior quadrature of the constant function, the Liouville volume.
    pub volume: f64,
    pub trapped_rays: usize,
    /// `C exp(-Q T_cap) ||f||_inf` when the decay constants are supplied.
    pub truncation_bound: Option<f64>,
}

/// Interior Liouville quadrature of `f` and of the constant one.
fn liouville_quadrature<M: Manifold + ?Sized>(m: &M, f: Integrand<'_>, n: usize) -> Result<(f64, f64, f64)> {
    let nz = n.try_into().map_err(|_| LensError::InvalidArgument("quadrature needs nodes".into()))?;
    let gl = GaussLegendre::new(nz);
    let rule = gl.as_node_weight_pairs();
    let n_ang = 2 * n;
    let n_fib = 2 * n;
    let chart = *m.chart();
    let rows: Vec<(f64, f64, f64)> = rule
        .par_iter()
        .map(|&(u, wu)| -> Result<(f64, f64, f64)> {
            let (mut acc, mut vol, mut sup) = (0.0, 0.0, 0.0f64);
            for ia in 0..n_ang {
                let (x, jac) = match chart {
                    Chart::Disk { radius } => {
                        let r = 0.5 * radius * (u + 1.0);
                        let a = TAU * ia as f64 / n_ang as f64;
                        (Point::new(r * a.cos(), r * a.sin()), 0.5 * radius * r * TAU / n_ang as f64)
                    }
                    Chart::Strip { half_width, circumference } => {
                        let phi = circumference * ia as f64 / n_ang as f64;
                        (Point::new(half_width * u, phi), half_width * circumference / n_ang as f64)
                    }
                };
                let mt = m.metric_at(&x)?;
                let (e1, e2) = mt.orthonormal_frame();
                let w = wu * jac * mt.sqrt_det * TAU / n_fib as f64;
                for ib in 0..n_fib {
                    let b = TAU * (ib as f64 + 0.5) / n_fib as f64;
                    let v = e1 * b.cos() + e2 * b.sin();
                    let val = f(&x, &v)?;
                    sup = sup.max(val.abs());
                    acc += w * val;
                    vol += w;
                }
            }
            Ok((acc, vol, sup))
        })
        .collect::<Result<_>>()?;
    Ok(rows.iter().fold((0.0, 0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1, a.2.max(r.2))))
}

/// Compare the interior Liouville integral of `f` with its boundary-ray
/// representation. `decay = (C, Q)` yields the trapped-ray truncation bound.
pub fn santalo_compare<M: Manifold + ?Sized>(
    m: &M,
    f: Integrand<'_>,
    quad: SantaloQuadrature,
    opts: &FlowOptions,
    decay: Option<(f64, f64)>,
) -> Result<SantaloReport> {
    if quad.n_s == 0 || quad.n_theta == 0 {
        return Err(LensError::InvalidArgument("boundary quadrature needs nodes".into()));
    }
    let (lhs, volume, sup) = liouville_quadrature(m, f, quad.n_interior)?;
    let total = m.boundary_length();
    let ds = total / quad.n_s as f64;
    let dth = std::f64::consts::PI / quad.n_theta as f64;
    let cells: Vec<(f64, bool)> = (0..quad.n_s * quad.n_theta)
        .into_par_iter()
        .map(|c| -> Result<(f64, bool)> {
            let (i, j) = (c / quad.n_theta, c % quad.n_theta);
            let s = (i as f64 + 0.5) * ds;
            let th = -0.5 * std::f64::consts::PI + (j as f64 + 0.5) * dth;
            let w = ds * ((th + 0.5 * dth).sin() - (th - 0.5 * dth).sin());
            let (y, _) = m.phase_from_boundary(s, th)?;
            let out = trace_ray(m, &y, Some(f), opts)?;
            Ok((w * out.integral, out.trapped))
        })
        .collect::<Result<_>>()?;
    let rhs: f64 = cells.iter().map(|c| c.0).sum();
    let trapped_rays = cells.iter().filter(|c| c.1).count();
    let scale = lhs.abs().max(rhs.abs());
    let rel_err = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    Ok(SantaloReport {
        lhs,
        rhs,
        rel_err,
        volume,
        trapped_rays,
        truncation_bound: decay.map(|(c, q)| c * (-q * opts.t_cap).exp() * sup),
    })
}
