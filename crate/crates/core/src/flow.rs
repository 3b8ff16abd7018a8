//! Geodesic flow, boundary exit and lens data per ray.

use std::io::Write;

use nalgebra::{Matrix4, Vector4};
use serde::Serialize;

use crate::error::{LensError, Result};
use crate::geometry::{wrap_point, Manifold, PhasePoint, Point, Tangent};
use crate::ode::{dp5_step, Adaptive, Control, System};

/// Scalar integrand `f(x, v)` accumulated along a ray.
pub type Integrand<'a> = &'a (dyn Fn(&Point, &Tangent) -> Result<f64> + Sync);

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowOptions {
    pub tol: f64,
    pub t_cap: f64,
    pub renormalize: bool,
    /// Bound on `|rho|` at a located exit.
    pub exit_tol: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { tol: 1e-10, t_cap: 200.0, renormalize: true, exit_tol: 1e-13 }
    }
}

impl FlowOptions {
    pub fn new(tol: f64, t_cap: f64) -> Self {
        Self { tol, t_cap, renormalize: true, exit_tol: 1e-13 }
    }

    fn validate(&self) -> Result<()> {
        if !(1e-13..=1e-6).contains(&self.tol) {
            return Err(LensError::InvalidArgument(format!("integrator tolerance {} outside [1e-13, 1e-6]", self.tol)));
        }
        if !(1e-15..=1e-8).contains(&self.exit_tol) {
            return Err(LensError::InvalidArgument(format!("exit tolerance {} outside [1e-15, 1e-8]", self.exit_tol)));
        }
        if !(self.t_cap > 0.0) {
            return Err(LensError::InvalidArgument("t_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RenormLog {
    pub count: usize,
    pub max_correction: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub renorm: RenormLog,
}

impl Trajectory {
    /// Rows `t,x,y,vx,vy`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "x", "y", "vx", "vy"])?;
        for (t, p) in self.times.iter().zip(&self.points) {
            wtr.serialize((t, p.x[0], p.x[1], p.v[0], p.v[1]))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Geodesic<'a, M: Manifold + ?Sized> {
    m: &'a M,
    integrand: Option<Integrand<'a>>,
}

impl<M: Manifold + ?Sized> System<5> for Geodesic<'_, M> {
    fn rhs(&self, y: &[f64; 5]) -> Result<[f64; 5]> {
        let x = Point::new(y[0], y[1]);
        let v = Tangent::new(y[2], y[3]);
        let a = self.m.christoffel_at(&x)?.quad(&v);
        let q = match self.integrand {
            Some(f) => f(&wrap_point(self.m.chart(), &x), &v)?,
            None => 0.0,
        };
        Ok([v[0], v[1], -a[0], -a[1], q])
    }
}

fn pack(y: &PhasePoint) -> [f64; 5] {
    [y.x[0], y.x[1], y.v[0], y.v[1], 0.0]
}

fn unpack(s: &[f64]) -> PhasePoint {
    PhasePoint { x: Point::new(s[0], s[1]), v: Tangent::new(s[2], s[3]) }
}

fn renormalize<M: Manifold + ?Sized>(m: &M, s: &mut [f64], log: &mut RenormLog) -> Result<()> {
    let x = Point::new(s[0], s[1]);
    let v = Tangent::new(s[2], s[3]);
    let n = m.metric_at(&x)?.norm(&v);
    log.count += 1;
    log.max_correction = log.max_correction.max((n - 1.0).abs());
    s[2] /= n;
    s[3] /= n;
    Ok(())
}

/// Integrate the geodesic flow from `y` up to `t_end`, ignoring the boundary.
pub fn integrate_geodesic<M: Manifold + ?Sized>(
    m: &M,
    y: &PhasePoint,
    t_end: f64,
    opts: &FlowOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    let sys = Geodesic { m, integrand: None };
    let mut traj = Trajectory { times: vec![0.0], points: vec![*y], renorm: RenormLog::default() };
    let ad = Adaptive::new(opts.tol, m.chart().size());
    let mut log = RenormLog::default();
    ad.run(&sys, pack(y), t_end, |t, h, _, y_new| {
        if opts.renormalize {
            renormalize(m, y_new, &mut log)?;
        }
        traj.times.push(t + h);
        traj.points.push(unpack(y_new));
        Ok(Control::Continue)
    })?;
    traj.renorm = log;
    Ok(traj)
}

/// Result of following a ray until it leaves `M` or reaches the cap.
#[derive(Clone, Copy, Debug)]
pub struct RayOutcome {
    /// Exit time, or the cap for trapped rays.
    pub length: f64,
    pub trapped: bool,
    /// Phase point at exit (or at the cap).
    pub state: PhasePoint,
    /// Accumulated integrand over `[0, length]`.
    pub integral: f64,
    pub renorm: RenormLog,
}

/// Follow the ray through `y` until the first crossing of the boundary.
pub fn trace_ray<M: Manifold + ?Sized>(
    m: &M,
    y: &PhasePoint,
    integrand: Option<Integrand<'_>>,
    opts: &FlowOptions,
) -> Result<RayOutcome> {
    opts.validate()?;
    let sys = Geodesic { m, integrand };
    let chart = *m.chart();
    let ad = Adaptive::new(opts.tol, chart.size());
    let mut log = RenormLog::default();
    let mut bracket: Option<(f64, f64, [f64; 5])> = None;
    let (t_end, y_end) = ad.run(&sys, pack(y), opts.t_cap, |t, h, y_old, y_new| {
        if chart.rho(&Point::new(y_new[0], y_new[1])) <= 0.0 {
            bracket = Some((t, h, *y_old));
            return Ok(Control::Stop);
        }
        if opts.renormalize {
            renormalize(m, y_new, &mut log)?;
        }
        Ok(Control::Continue)
    })?;
    match bracket {
        None => Ok(RayOutcome {
            length: t_end,
            trapped: true,
            state: unpack(&y_end),
            integral: y_end[4],
            renorm: log,
        }),
        Some((t0, h, y0)) => {
            let (tau, ye) = locate_exit(&sys, &y0, h, opts.exit_tol)?;
            Ok(RayOutcome { length: t0 + tau, trapped: false, state: unpack(&ye), integral: ye[4], renorm: log })
        }
    }
}

/// Find `tau` in `(0, h]` with `rho(step(y0, tau)) = 0`, given `rho <= 0` at `h`.
fn locate_exit<M: Manifold + ?Sized>(sys: &Geodesic<'_, M>, y0: &[f64; 5], h: f64, exit_tol: f64) -> Result<(f64, [f64; 5])> {
    let chart = *sys.m.chart();
    let eval = |tau: f64| -> Result<(f64, f64, [f64; 5])> {
        let ys = if tau == 0.0 { *y0 } else { dp5_step(sys, y0, tau)?.0 };
        let x = Point::new(ys[0], ys[1]);
        let rho = chart.rho(&x);
        let drho = chart.grad_rho(&x).dot(&Tangent::new(ys[2], ys[3]));
        Ok((rho, drho, ys))
    };
    let (mut lo, mut hi) = (0.0, h);
    let (mut f_hi, mut d_hi, mut y_hi) = eval(h)?;
    if f_hi == 0.0 {
        return Ok((h, y_hi));
    }
    let (f_lo, _, _) = eval(0.0)?;
    if f_lo <= 0.0 {
        // Starting on the boundary: move the lower end inside.
        let mut tau = h;
        loop {
            tau *= 0.5;
            if tau < 1e-15 * h.max(1.0) {
                return Ok((0.0, *y0));
            }
            let e = eval(tau)?;
            if e.0 > 0.0 {
                lo = tau;
                break;
            }
            hi = tau;
            (f_hi, d_hi, y_hi) = e;
        }
    }
    let (mut tau, mut f, mut d, mut ys) = (hi, f_hi, d_hi, y_hi);
    for _ in 0..100 {
        if f.abs() <= exit_tol {
            break;
        }
        if f > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
        if hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
        let newton = if d != 0.0 { tau - f / d } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let e = eval(next)?;
        tau = next;
        f = e.0;
        d = e.1;
        ys = e.2;
    }
    Ok((tau, ys))
}

/// Exit data of a non-trapped ray.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExitData {
    pub s_out: f64,
    pub theta_out: f64,
    pub point: [f64; 2],
    pub velocity: [f64; 2],
}

/// Per-ray lens record.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LensDatum {
    pub s: f64,
    pub theta: f64,
    /// Travel time, or the cap for trapped rays.
    pub length: f64,
    pub trapped: bool,
    pub exit: Option<ExitData>,
    pub clairaut: Option<f64>,
}

impl LensDatum {
    pub fn exit_phase(&self) -> Option<PhasePoint> {
        self.exit.map(|e| PhasePoint {
            x: Point::new(e.point[0], e.point[1]),
            v: Tangent::new(e.velocity[0], e.velocity[1]),
        })
    }
}

fn datum_from_outcome<M: Manifold + ?Sized>(m: &M, s: f64, theta: f64, y: &PhasePoint, out: &RayOutcome) -> Result<LensDatum> {
    let exit = if out.trapped {
        None
    } else {
        let (s_out, theta_out) = m.boundary_coordinates(&out.state, true)?;
        Some(ExitData {
            s_out,
            theta_out,
            point: [out.state.x[0], out.state.x[1]],
            velocity: [out.state.v[0], out.state.v[1]],
        })
    };
    Ok(LensDatum { s, theta, length: out.length, trapped: out.trapped, exit, clairaut: m.clairaut(y) })
}

/// Lens datum of an inward boundary phase point.
pub fn exit_record<M: Manifold + ?Sized>(m: &M, y: &PhasePoint, opts: &FlowOptions) -> Result<LensDatum> {
    let (s, theta) = m.boundary_coordinates(y, false)?;
    if !(theta.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(LensError::TangentialEntry(theta));
    }
    let out = trace_ray(m, y, None, opts)?;
    datum_from_outcome(m, s, theta, y, &out)
}

/// Lens datum at boundary coordinates `(s, theta)`, together with the
/// integral of `integrand` along the ray.
pub fn ray_at<M: Manifold + ?Sized>(
    m: &M,
    s: f64,
    theta: f64,
    integrand: Option<Integrand<'_>>,
    opts: &FlowOptions,
) -> Result<(LensDatum, f64)> {
    let (y, _) = m.phase_from_boundary(s, theta)?;
    let out = trace_ray(m, &y, integrand, opts)?;
    Ok((datum_from_outcome(m, s, theta, &y, &out)?, out.integral))
}

struct Variational<'a, M: Manifold + ?Sized> {
    m: &'a M,
}

impl<M: Manifold + ?Sized> System<20> for Variational<'_, M> {
    fn rhs(&self, y: &[f64; 20]) -> Result<[f64; 20]> {
        let x = Point::new(y[0], y[1]);
        let v = Tangent::new(y[2], y[3]);
        let gam = self.m.christoffel_at(&x)?;
        let dgam = self.m.christoffel_derivs(&x)?;
        let acc = gam.quad(&v);
        let mut a = Matrix4::zeros();
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        for k in 0..2 {
            for l in 0..2 {
                a[(2 + k, l)] = -dgam[l].quad(&v)[k];
            }
            for j in 0..2 {
                let mut s = 0.0;
                for i in 0..2 {
                    s += gam.0[k][i][j] * v[i];
                }
                a[(2 + k, 2 + j)] = -2.0 * s;
            }
        }
        let j = Matrix4::from_row_slice(&y[4..]);
        let dj = a * j;
        let mut out = [0.0; 20];
        out[0] = v[0];
        out[1] = v[1];
        out[2] = -acc[0];
        out[3] = -acc[1];
        for r in 0..4 {
            for c in 0..4 {
                out[4 + 4 * r + c] = dj[(r, c)];
            }
        }
        Ok(out)
    }
}

/// Differential of the time-`t` flow map in coordinates `(x, v)`.
pub fn flow_jacobian<M: Manifold + ?Sized>(m: &M, y: &PhasePoint, t: f64, tol: f64) -> Result<Matrix4<f64>> {
    if t < 0.0 {
        // phi_{-t}(x, v) = flip(phi_t(x, -v)).
        let flip = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, -1.0, -1.0));
        return Ok(flip * flow_jacobian(m, &y.flip(), -t, tol)? * flip);
    }
    let mut y0 = [0.0; 20];
    y0[..4].copy_from_slice(&[y.x[0], y.x[1], y.v[0], y.v[1]]);
    for k in 0..4 {
        y0[4 + 5 * k] = 1.0;
    }
    let ad = Adaptive::new(tol, m.chart().size());
    let (_, yt) = ad.run(&Variational { m }, y0, t, |_, _, _, _| Ok(Control::Continue))?;
    Ok(Matrix4::from_row_slice(&yt[4..]))
}

/// Gradient `(d l / d s, d l / d theta)` of the length map at a non-trapped
/// inward boundary point, from the implicit-function formula for the exit time.
pub fn length_gradient<M: Manifold + ?Sized>(m: &M, s: f64, theta: f64, opts: &FlowOptions) -> Result<[f64; 2]> {
    let (y, _) = m.phase_from_boundary(s, theta)?;
    let out = trace_ray(m, &y, None, opts)?;
    if out.trapped {
        return Err(LensError::InvalidArgument(format!("ray at ({s}, {theta}) is trapped")));
    }
    let xe = out.state.x;
    let ve = out.state.v;
    let (comp, u) = m.chart().locate(&xe);
    let frame = m.frame_at_curve(m.boundary_param().arclength(comp, u), &m.chart().curve(comp, u))?;
    let me = m.metric_at(&xe)?;
    let normal = -me.dot(&ve, &frame.nu_in);
    if normal.abs() < 1e-3 {
        return Err(LensError::NearGlancing(normal));
    }
    let j = flow_jacobian(m, &y, out.length, opts.tol.min(1e-11))?;
    let drho = m.chart().grad_rho(&xe);
    let transport = drho.dot(&ve);
    let row = (drho.transpose() * j.fixed_view::<2, 4>(0, 0)) / -transport;

    // Derivatives of the entry point in (s, theta).
    let step = 1e-3 * m.boundary_length() / std::f64::consts::TAU;
    let mut ds = Vector4::zeros();
    for &(o, c) in crate::interp::CENTRAL4.iter() {
        let (p, _) = m.phase_from_boundary(s + o as f64 * step, theta)?;
        ds += Vector4::new(p.x[0], p.x[1], p.v[0], p.v[1]) * (c / step);
    }
    let f = m.boundary_frame(s)?;
    let dv = -f.nu_in * theta.sin() + f.tangent * theta.cos();
    let dtheta = Vector4::new(0.0, 0.0, dv[0], dv[1]);
    Ok([(row * ds)[0], (row * dtheta)[0]])
}

struct JacobiScalar<'a, M: Manifold + ?Sized> {
    m: &'a M,
}

impl<M: Manifold + ?Sized> System<6> for JacobiScalar<'_, M> {
    fn rhs(&self, y: &[f64; 6]) -> Result<[f64; 6]> {
        let x = Point::new(y[0], y[1]);
        let v = Tangent::new(y[2], y[3]);
        let a = self.m.christoffel_at(&x)?.quad(&v);
        let k = self.m.gauss_curvature_at(&x)?;
        Ok([v[0], v[1], -a[0], -a[1], y[5], -k * y[4]])
    }
}

/// First zero of the normal Jacobi field `j'' + K j = 0`, `j(0) = 0`,
/// `j'(0) = 1` along the geodesic through `y`, or `None` up to `t_max`.
pub fn conjugate_scan<M: Manifold + ?Sized>(m: &M, y: &PhasePoint, t_max: f64, tol: f64) -> Result<Option<f64>> {
    let sys = JacobiScalar { m };
    let ad = Adaptive::new(tol, m.chart().size());
    let eps = 1e-8;
    let mut hit: Option<(f64, f64, [f64; 6])> = None;
    ad.run(&sys, [y.x[0], y.x[1], y.v[0], y.v[1], 0.0, 1.0], t_max, |t, h, y_old, y_new| {
        if t + h > eps && y_new[4] <= 0.0 {
            hit = Some((t, h, *y_old));
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    })?;
    let Some((t0, h, y0)) = hit else { return Ok(None) };
    let (mut lo, mut hi) = (0.0, h);
    if t0 == 0.0 {
        lo = eps;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if dp5_step(&sys, &y0, mid)?.0[4] > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(t0 + 0.5 * (lo + hi)))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReversalReport {
    /// Largest coordinate mismatch between the doubly scattered point and `flip(y)`.
    pub residual: f64,
    pub length_forward: f64,
    pub length_reversed: f64,
}

/// Scatter `y`, flip, scatter again and compare with `flip(y)`.
pub fn time_reversal_check<M: Manifold + ?Sized>(m: &M, y: &PhasePoint, opts: &FlowOptions) -> Result<ReversalReport> {
    let fwd = trace_ray(m, y, None, opts)?;
    if fwd.trapped {
        return Err(LensError::InvalidArgument("time reversal needs a non-trapped ray".into()));
    }
    let back = trace_ray(m, &fwd.state.flip(), None, opts)?;
    if back.trapped {
        return Err(LensError::InvalidArgument("reversed ray is trapped".into()));
    }
    let target = y.flip();
    let dx = back.state.x - target.x;
    let dv = back.state.v - target.v;
    let residual = dx.abs().max().max(dv.abs().max());
    Ok(ReversalReport { residual, length_forward: fwd.length, length_reversed: back.length })
}

/// Escape times `(tau_fwd, tau_bwd)` of an interior phase point, capped at `t_cap`.
pub fn escape_times<M: Manifold + ?Sized>(m: &M, y: &PhasePoint, opts: &FlowOptions) -> Result<(f64, f64)> {
    let f = trace_ray(m, y, None, opts)?;
    let b = trace_ray(m, &y.flip(), None, opts)?;
    Ok((f.length, b.length))
}

#[cfg(test)]
mod tests;
