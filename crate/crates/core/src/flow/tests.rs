use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::{Matrix2, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{Family, Geometry, GridMetric};

fn opts() -> FlowOptions {
    FlowOptions::new(1e-10, 200.0)
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Round sphere of curvature 1 in stereographic coordinates, restricted to a cap.
fn sphere_cap() -> Geometry {
    let gm = GridMetric::from_fn(Point::new(-2.5, -2.5), Point::new(2.5, 2.5), 201, 201, |x| {
        let f = 2.0 / (1.0 + x.norm_squared());
        Matrix2::identity() * (f * f)
    })
    .unwrap();
    Geometry::new(Family::Grid { radius: 0.5, metric: Arc::new(gm) }, 3.5).unwrap()
}

#[test]
fn flat_ray_reaches_center() {
    let g = Geometry::flat_disk(1.0);
    let (y, _) = g.phase_from_boundary(0.0, 0.0).unwrap();
    let tr = integrate_geodesic(&g, &y, 1.0, &opts()).unwrap();
    let last = tr.points.last().unwrap();
    assert_abs_diff_eq!(*tr.times.last().unwrap(), 1.0, epsilon = 1e-14);
    assert!(last.x.norm() < 1e-12);
    assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn cylinder_closed_geodesic_stays_on_core() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let y = PhasePoint::unit(&g, Point::new(0.0, 0.0), Tangent::new(0.0, 1.0)).unwrap();
    let tr = integrate_geodesic(&g, &y, 30.0, &opts()).unwrap();
    assert!(tr.points.iter().all(|p| p.x[0] == 0.0));
}

#[test]
fn clairaut_and_norm_are_conserved() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let y = PhasePoint::normalized(&g, Point::new(0.0, 1.0), Tangent::new(0.02, 1.0)).unwrap();
    let c0 = g.clairaut(&y).unwrap();
    let tr = integrate_geodesic(&g, &y, 4.0, &opts()).unwrap();
    for (t, p) in tr.times.iter().zip(&tr.points) {
        let n = g.metric_at(&p.x).unwrap().norm(&p.v);
        assert!((n - 1.0).abs() <= 1e-9 * (1.0 + t));
        assert!((g.clairaut(p).unwrap() - c0).abs() <= 1e-9 * t.max(1e-3));
    }
    assert!(tr.renorm.count > 0);
    assert!(tr.renorm.max_correction < 1e-9);
}

#[test]
fn flat_chords() {
    let g = Geometry::flat_disk(1.0);
    for &(s, th) in &[(0.0, 0.0), (1.0, 0.6), (4.0, -1.2), (2.5, 1.5)] {
        let (y, _) = g.phase_from_boundary(s, th).unwrap();
        let d = exit_record(&g, &y, &opts()).unwrap();
        assert!(!d.trapped);
        let e = d.exit.unwrap();
        assert_abs_diff_eq!(d.length, 2.0 * th.cos(), epsilon = 1e-9);
        assert_abs_diff_eq!(wrap(e.s_out - (s + PI - 2.0 * th)), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.theta_out, th, epsilon = 1e-9);
        assert!((1.0 - (e.point[0].powi(2) + e.point[1].powi(2)).sqrt()).abs() <= 1e-10);
    }
}

#[test]
fn cylinder_radial_ray() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let (y, _) = g.phase_from_boundary(1.3, 0.0).unwrap();
    let d = exit_record(&g, &y, &opts()).unwrap();
    assert_abs_diff_eq!(d.length, 2.0, epsilon = 1e-10);
    let e = d.exit.unwrap();
    let (comp, _) = g.boundary_param().split(e.s_out);
    assert_eq!(comp, 1);
    assert_abs_diff_eq!(e.theta_out, 0.0, epsilon = 1e-10);
    // Outgoing: positive normal component.
    let m = g.metric_at(&Point::new(e.point[0], e.point[1])).unwrap();
    assert!(m.dot(&Tangent::new(e.velocity[0], e.velocity[1]), &Tangent::new(-1.0, 0.0)) > 0.0);
}

#[test]
fn tangential_entry_is_rejected() {
    let g = Geometry::flat_disk(1.0);
    assert!(matches!(ray_at(&g, 0.0, FRAC_PI_2, None, &opts()), Err(LensError::TangentialEntry(_))));
}

#[test]
fn tolerance_range_is_enforced() {
    let g = Geometry::flat_disk(1.0);
    let (y, _) = g.phase_from_boundary(0.0, 0.0).unwrap();
    assert!(integrate_geodesic(&g, &y, 1.0, &FlowOptions::new(1e-3, 10.0)).is_err());
    assert!(integrate_geodesic(&g, &y, 1.0, &FlowOptions::new(1e-14, 10.0)).is_err());
}

/// Entry angle of the stable manifold of the core geodesic, found by bisecting
/// on the exit component. Entries below the threshold cross the core.
fn stable_angle_by_bisection(g: &Geometry) -> f64 {
    let crosses = |th: f64| {
        let (d, _) = ray_at(g, 0.0, th, None, &FlowOptions::new(1e-12, 200.0)).unwrap();
        g.boundary_param().split(d.exit.unwrap().s_out).0 == 1
    };
    let (mut lo, mut hi) = (0.3, 1.2);
    assert!(crosses(lo) && !crosses(hi));
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if crosses(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn stable_manifold_entry_is_trapped() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let theta_star = (1.0 / 1f64.cosh()).asin();
    let oracle = stable_angle_by_bisection(&g);
    assert_abs_diff_eq!(oracle, theta_star, epsilon = 1e-8);
    let (d, _) = ray_at(&g, 0.0, theta_star, None, &FlowOptions::new(1e-12, 20.0)).unwrap();
    assert!(d.trapped);
    assert_eq!(d.length, 20.0);
    assert!(d.exit.is_none());
}

#[test]
fn jacobian_at_zero_is_identity() {
    let g = Geometry::conformal_disk(1.0, 0.1);
    let y = PhasePoint::normalized(&g, Point::new(0.2, 0.1), Tangent::new(1.0, 0.3)).unwrap();
    assert_eq!(flow_jacobian(&g, &y, 0.0, 1e-11).unwrap(), Matrix4::identity());
}

#[test]
fn flat_jacobian_is_shear() {
    let g = Geometry::flat_disk(1.0);
    let y = PhasePoint::normalized(&g, Point::new(-0.5, 0.0), Tangent::new(1.0, 0.0)).unwrap();
    let j = flow_jacobian(&g, &y, 0.7, 1e-11).unwrap();
    let mut expect = Matrix4::identity();
    expect[(0, 2)] = 0.7;
    expect[(1, 3)] = 0.7;
    assert!((j - expect).abs().max() < 1e-12);
}

#[test]
fn core_geodesic_has_unit_lyapunov_exponent() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let y = PhasePoint::unit(&g, Point::new(0.0, 0.0), Tangent::new(0.0, 1.0)).unwrap();
    let j = flow_jacobian(&g, &y, 3.0, 1e-11).unwrap();
    let block = Matrix2::new(j[(0, 0)], j[(0, 2)], j[(2, 0)], j[(2, 2)]);
    let eig = block.symmetric_eigenvalues();
    let big = eig.max();
    assert!((big / 3f64.exp() - 1.0).abs() < 0.02, "growth {big}");
}

fn flow_map(g: &Geometry, y: &[f64; 4], t: f64) -> [f64; 4] {
    let p = PhasePoint { x: Point::new(y[0], y[1]), v: Tangent::new(y[2], y[3]) };
    let o = FlowOptions { tol: 1e-13, t_cap: 1.0, renormalize: false, ..FlowOptions::default() };
    let (start, dur) = if t >= 0.0 { (p, t) } else { (p.flip(), -t) };
    let tr = integrate_geodesic(g, &start, dur, &o).unwrap();
    let q = tr.points.last().unwrap();
    let q = if t >= 0.0 { *q } else { q.flip() };
    [q.x[0], q.x[1], q.v[0], q.v[1]]
}

#[test]
fn jacobian_matches_finite_differences() {
    for g in [Geometry::conformal_disk(1.0, 0.1), Geometry::hyperbolic_cylinder(1.0)] {
        let y = PhasePoint::normalized(&g, Point::new(0.1, 0.2), Tangent::new(0.3, 0.5)).unwrap();
        for &t in &[0.6, -0.5] {
            let j = flow_jacobian(&g, &y, t, 1e-12).unwrap();
            let base = [y.x[0], y.x[1], y.v[0], y.v[1]];
            let h = 1e-5;
            for c in 0..4 {
                let mut p = base;
                let mut m = base;
                p[c] += h;
                m[c] -= h;
                let (fp, fm) = (flow_map(&g, &p, t), flow_map(&g, &m, t));
                for r in 0..4 {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((fd - j[(r, c)]).abs() <= 1e-5 * (1.0 + fd.abs()), "{} t={t} ({r},{c})", g.label());
                }
            }
        }
    }
}

#[test]
fn flat_length_gradient() {
    let g = Geometry::flat_disk(1.0);
    for &(s, th) in &[(0.3, 0.4), (2.0, -0.9), (5.0, 0.0)] {
        let d = length_gradient(&g, s, th, &opts()).unwrap();
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(d[1], -2.0 * f64::sin(th), epsilon = 1e-7);
    }
}

#[test]
fn length_gradient_matches_finite_differences() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let o = FlowOptions::new(1e-12, 200.0);
    let theta_star = (1.0 / 1f64.cosh()).asin();
    let len = |s: f64, th: f64| ray_at(&g, s, th, None, &o).unwrap().0.length;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 20 {
        let s = rng.random_range(0.0..g.boundary_length());
        let th: f64 = rng.random_range(-1.2..1.2);
        if (th.abs() - theta_star).abs() < 0.1 {
            continue;
        }
        let grad = length_gradient(&g, s, th, &o).unwrap();
        let h = 1e-4;
        let fd_s = (len(s + h, th) - len(s - h, th)) / (2.0 * h);
        let fd_t = (len(s, th + h) - len(s, th - h)) / (2.0 * h);
        let scale = grad[0].abs().max(grad[1].abs()).max(1e-2);
        assert!((grad[0] - fd_s).abs() <= 1e-4 * scale, "ds {} vs {fd_s}", grad[0]);
        assert!((grad[1] - fd_t).abs() <= 1e-4 * scale, "dtheta {} vs {fd_t}", grad[1]);
        checked += 1;
    }
}

#[test]
fn near_glancing_is_refused() {
    let g = Geometry::flat_disk(1.0);
    assert!(matches!(length_gradient(&g, 0.0, FRAC_PI_2 - 5e-4, &opts()), Err(LensError::NearGlancing(_))));
}

#[test]
fn no_conjugate_points_without_positive_curvature() {
    let flat = Geometry::flat_disk(1.0);
    let (y, _) = flat.phase_from_boundary(0.0, 0.3).unwrap();
    assert_eq!(conjugate_scan(&flat, &y, 1.9, 1e-10).unwrap(), None);
    let cyl = Geometry::hyperbolic_cylinder(1.0);
    let y = PhasePoint::unit(&cyl, Point::new(0.0, 0.0), Tangent::new(0.0, 1.0)).unwrap();
    assert_eq!(conjugate_scan(&cyl, &y, 20.0, 1e-10).unwrap(), None);
}

#[test]
fn sphere_cap_conjugate_time() {
    let g = sphere_cap();
    let (y, _) = g.phase_from_boundary(0.0, 0.0).unwrap();
    let t = conjugate_scan(&g, &y, 4.0, 1e-10).unwrap().expect("conjugate point");
    assert!((t / PI - 1.0).abs() < 0.01, "conjugate time {t}");
}

#[test]
fn time_reversal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (g, bound) in [(Geometry::flat_disk(1.0), 1e-8), (Geometry::hyperbolic_cylinder(1.0), 1e-7)] {
        for _ in 0..10 {
            let s = rng.random_range(0.0..g.boundary_length());
            let th = rng.random_range(-1.4..1.4);
            let (y, _) = g.phase_from_boundary(s, th).unwrap();
            let r = time_reversal_check(&g, &y, &opts()).unwrap();
            assert!(r.residual <= bound, "{} residual {}", g.label(), r.residual);
            assert!((r.length_forward - r.length_reversed).abs() <= 1e-9);
        }
    }
}

#[test]
fn escape_time_examples() {
    let o = FlowOptions::new(1e-10, 50.0);
    let flat = Geometry::flat_disk(1.0);
    let y = PhasePoint::unit(&flat, Point::zeros(), Tangent::new(0.6, 0.8)).unwrap();
    let (f, b) = escape_times(&flat, &y, &o).unwrap();
    assert_abs_diff_eq!(f, 1.0, epsilon = 1e-10);
    assert_abs_diff_eq!(b, 1.0, epsilon = 1e-10);

    let cyl = Geometry::hyperbolic_cylinder(1.0);
    let y = PhasePoint::unit(&cyl, Point::zeros(), Tangent::new(0.0, 1.0)).unwrap();
    assert_eq!(escape_times(&cyl, &y, &o).unwrap(), (50.0, 50.0));
    let y = PhasePoint::unit(&cyl, Point::zeros(), Tangent::new(1.0, 0.0)).unwrap();
    let (f, b) = escape_times(&cyl, &y, &o).unwrap();
    assert_abs_diff_eq!(f, 1.0, epsilon = 1e-10);
    assert_abs_diff_eq!(b, 1.0, epsilon = 1e-10);
}

#[test]
fn trajectory_csv_has_header_and_rows() {
    let g = Geometry::flat_disk(1.0);
    let (y, _) = g.phase_from_boundary(0.0, 0.0).unwrap();
    let tr = integrate_geodesic(&g, &y, 1.0, &opts()).unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x,y,vx,vy"));
    assert_eq!(lines.count(), tr.times.len());
    assert!(!text.contains('\r'));
}

#[test]
fn integrand_sees_wrapped_points() {
    let g = Geometry::hyperbolic_cylinder(1.0);
    let period = g.boundary_length() / 2.0;
    let inside = |x: &Point, _: &Tangent| Ok(if (0.0..period).contains(&x[1]) { 1.0 } else { 0.0 });
    for (s, th) in [(0.1, -1.2), (period - 0.1, 1.2), (period + 0.2, 1.0), (2.0 * period - 0.1, -1.0)] {
        let (y, _) = g.phase_from_boundary(s, th).unwrap();
        let out = trace_ray(&g, &y, Some(&inside), &opts()).unwrap();
        assert!(!out.trapped);
        assert_abs_diff_eq!(out.integral, out.length, epsilon = 1e-9);
    }
}
