use super::*;
use crate::geometry::Geometry;
use crate::tensors::{FnField, MetricField, SymDerivative};

fn layout(n_s: usize, n_theta: usize) -> GridLayout {
    GridLayout::new(n_s, n_theta).with_flow(FlowOptions::new(1e-10, 40.0))
}

fn bgrid(geom: &Geometry, n_s: usize, n_theta: usize) -> Arc<BoundaryGrid> {
    Arc::new(boundary_grid(geom, layout(n_s, n_theta)).unwrap())
}

fn igrid(geom: &Geometry, n: usize) -> Arc<InteriorGrid> {
    Arc::new(InteriorGrid::new(geom, n, geom.extension_margin()).unwrap())
}

/// `Re(z^k dz^2)`, divergence free for every conformally flat metric.
fn holomorphic(k: i32) -> FnField {
    FnField::new(2, move |x| {
        let z = (x[0] * x[0] + x[1] * x[1]).sqrt().powi(k);
        let a = k as f64 * x[1].atan2(x[0]);
        let (re, im) = (z * a.cos(), z * a.sin());
        [re, -im, -re]
    })
    .unwrap()
}

#[test]
fn weights_are_cell_exact() {
    for geom in [Geometry::flat_disk(1.0), Geometry::hyperbolic_cylinder(1.0)] {
        let g = bgrid(&geom, 16, 8);
        let sum: f64 = g.weights().iter().sum();
        let exact = 2.0 * g.layout.theta_max.sin() * geom.boundary_length();
        assert!((sum - exact).abs() < 1e-10, "{sum} vs {exact}");
        assert!((g.total_measure() - exact).abs() < 1e-10);
    }
}

#[test]
fn cylinder_trapped_fraction_is_small() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    let g = bgrid(&geom, 16, 16);
    let frac = g.trapped_count() as f64 / g.len() as f64;
    assert!(frac <= 2.0 / 16.0, "{frac}");
}

#[test]
fn component_count_must_divide_n_s() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    assert!(boundary_grid(&geom, layout(15, 8)).is_err());
}

#[test]
fn flat_xray_of_metric_is_chord_length() {
    let geom = Geometry::flat_disk(1.0);
    let g = bgrid(&geom, 16, 12);
    let ih = xray_m(&geom, &MetricField(&geom), &g).unwrap();
    for k in 0..g.len() {
        let th = g.datum(k).theta;
        assert!((ih.values[k].unwrap() - 2.0 * th.cos()).abs() < 1e-8);
    }
}

#[test]
fn xray_of_one_is_length() {
    let geom = Geometry::conformal_disk(1.0, 0.05);
    let g = bgrid(&geom, 16, 12);
    let one = FnField::new(0, |_| [1.0, 0.0, 0.0]).unwrap();
    let i0 = xray_m(&geom, &one, &g).unwrap();
    for k in 0..g.len() {
        assert!((i0.values[k].unwrap() - g.datum(k).length).abs() < 1e-9);
    }
}

#[test]
fn xray_annihilates_potential_fields() {
    let geom = Geometry::conformal_disk(1.0, 0.05);
    let g = bgrid(&geom, 16, 12);
    let p = FnField::new(1, |x| {
        let b = 1.0 - x.norm_squared();
        [b * x[1], b * (x[0] + 0.5 * x[1] * x[1]), 0.0]
    })
    .unwrap()
    .with_gradient(|x| {
        let (x0, x1) = (x[0], x[1]);
        let b = 1.0 - x0 * x0 - x1 * x1;
        let q = x0 + 0.5 * x1 * x1;
        [[-2.0 * x0 * x1, b - 2.0 * x0 * q, 0.0], [b - 2.0 * x1 * x1, -2.0 * x1 * q + b * x1, 0.0]]
    });
    let dp = SymDerivative::new(&geom, &p).unwrap();
    let vals = xray_m(&geom, &dp, &g).unwrap();
    for v in vals.values.iter().flatten() {
        assert!(v.abs() < 1e-6, "{v}");
    }
}

#[test]
fn adjoint_examples() {
    let geom = Geometry::flat_disk(1.0);
    let g = bgrid(&geom, 16, 12);
    let ig = igrid(&geom, 12);
    let zero = XRaySamples::from_fn(g.clone(), 2, |_, _| 0.0);
    let f = xray_adjoint_m(&geom, &zero, &ig, 16, Mask::Inside).unwrap();
    assert_eq!(f.max_abs(Mask::SupportExt), 0.0);
    let one = XRaySamples::from_fn(g, 0, |_, _| 1.0);
    let f = xray_adjoint_m(&geom, &one, &ig, 16, Mask::Inside).unwrap();
    let sel = ig.mask(Mask::Inside);
    for (k, v) in f.data().iter().enumerate() {
        if sel[k] {
            assert!((v[0] - TAU).abs() < 1e-9, "{}", v[0]);
        }
    }
}

#[test]
fn samples_csv_marks_trapped_rows() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    let g = bgrid(&geom, 8, 8);
    let s = XRaySamples::from_fn(g.clone(), 0, |s, t| s + t);
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "s,theta,weight,value,trapped");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), g.len());
    for (k, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[4] == "true", g.trapped(k));
        if g.trapped(k) {
            assert!(cols[3].is_empty());
        }
    }
}

#[test]
fn samples_csv_round_trips() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    let g = bgrid(&geom, 8, 16);
    let s = XRaySamples::from_fn(g.clone(), 2, |s, t| (3.0 * s).sin() / 7.0 + t.exp());
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let back = XRaySamples::read_csv(g.clone(), 2, buf.as_slice()).unwrap();
    assert_eq!(back.values, s.values);
    let other = bgrid(&geom, 8, 8);
    assert!(matches!(XRaySamples::read_csv(other, 2, buf.as_slice()), Err(LensError::GridMismatch(_))));
}

#[test]
fn ray_operator_matches_pointwise_transform() {
    let geom = Geometry::conformal_disk(1.0, 0.05);
    let ig = igrid(&geom, 40);
    let g = bgrid(&geom, 24, 12);
    let op = RayOperator::new(&geom, ig.clone(), g.clone(), 2, Mask::Support).unwrap();
    assert!(op.nnz() > 0);
    let h = holomorphic(2);
    let exact = xray_m(&geom, &h, &g).unwrap();
    let f = SymTensorField::sample(ig, &h, Mask::Support).unwrap();
    let approx = op.forward(&f).unwrap();
    let err = approx.axpy(-1.0, &exact).unwrap().norm();
    assert!(err < 1e-4 * exact.norm(), "{err} vs {}", exact.norm());
}

#[test]
fn normal_operator_is_symmetric_psd() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    let ig = igrid(&geom, 20);
    let g = bgrid(&geom, 16, 8);
    let op = RayOperator::new(&geom, ig.clone(), g, 2, Mask::Support).unwrap();
    let a = SymTensorField::sample(ig.clone(), &FnField::new(2, |x| [x[0].cos(), x[1].sin(), 1.0]).unwrap(), Mask::Support).unwrap();
    let b = SymTensorField::sample(ig, &FnField::new(2, |x| [x[1].cos(), 0.3, x[0] * x[0]]).unwrap(), Mask::Support).unwrap();
    let na = normal_apply(&op, &a, false).unwrap();
    let nb = normal_apply(&op, &b, false).unwrap();
    let ab = na.inner(&b, Mask::Support).unwrap();
    let ba = nb.inner(&a, Mask::Support).unwrap();
    assert!((ab - ba).abs() <= 1e-10 * ab.abs().max(1.0), "{ab} vs {ba}");
    assert!(na.inner(&a, Mask::Support).unwrap() >= 0.0);
    let fa = op.forward(&a).unwrap();
    assert!((na.inner(&a, Mask::Support).unwrap() - fa.inner(&fa).unwrap()).abs() < 1e-10 * fa.inner(&fa).unwrap());
}

#[test]
fn zero_data_inverts_to_zero() {
    let geom = Geometry::conformal_disk(1.0, 0.05);
    let ig = igrid(&geom, 20);
    let g = bgrid(&geom, 16, 8);
    let op = RayOperator::new(&geom, ig.clone(), g.clone(), 2, Mask::Support).unwrap();
    let d = DirichletOps::new(ig, 1, crate::tensors::Domain::Base).unwrap();
    let data = XRaySamples::from_fn(g, 2, |_, _| 0.0);
    let inv = invert_cg(&op, &d, &data, None, &InversionOptions::default()).unwrap();
    assert_eq!(inv.report.iters, 0);
    assert_eq!(inv.field.max_abs(Mask::Support), 0.0);
    let json = inv.report.to_json();
    for key in ["iters", "residual", "l2_error_if_known", "lambda"] {
        assert!(json.get(key).is_some());
    }
}

#[test]
fn coarse_inversion_recovers_solenoidal_field() {
    let geom = Geometry::conformal_disk(1.0, 0.05);
    let ig = igrid(&geom, 32);
    let g = bgrid(&geom, 64, 32);
    let op = RayOperator::new(&geom, ig.clone(), g.clone(), 2, Mask::Support).unwrap();
    let d = DirichletOps::new(ig.clone(), 1, crate::tensors::Domain::Base).unwrap();
    let h = holomorphic(2);
    let data = xray_m(&geom, &h, &g).unwrap();
    let truth = SymTensorField::sample(ig, &h, Mask::Support).unwrap();
    let opts = InversionOptions { max_iter: 200, ..Default::default() };
    let inv = invert_cg(&op, &d, &data, Some(&truth), &opts).unwrap();
    let err = inv.report.l2_error_if_known.unwrap();
    assert!(err < 0.2, "{:?}", inv.report);
    assert!(inv.report.divergence_ratio < 1e-4, "{:?}", inv.report);
}

#[test]
fn stability_rejects_potential_fields() {
    let geom = Geometry::conformal_disk(1.0, 0.05);
    let ext = geom.extended().unwrap();
    let ig = igrid(&geom, 20);
    let g = bgrid(&ext, 16, 8);
    let op = RayOperator::new(&ext, ig, g, 2, Mask::SupportExt).unwrap();
    let p = FnField::new(1, |x| [x[0] * x[1], x[0], 0.0]).unwrap();
    let dp = SymDerivative::new(&geom, &p).unwrap();
    let r = stability_diagnostic(&op, &[("dp".into(), &dp as &dyn TensorField)]);
    assert!(matches!(r, Err(LensError::NotSolenoidal(_))), "{r:?}");
}

#[test]
fn weighted_bound_rejects_large_delta() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    let g = bgrid(&geom, 8, 8);
    let r = weighted_bound_check(&geom, &MetricField(&geom), 0.6, 1.0, &g);
    assert!(matches!(r, Err(LensError::DeltaTooLarge { .. })));
}

#[test]
fn weighted_bound_is_stable_under_refinement() {
    let geom = Geometry::hyperbolic_cylinder(1.0);
    let a = weighted_bound_check(&geom, &MetricField(&geom), 0.2, 1.0, &bgrid(&geom, 8, 16)).unwrap();
    let b = weighted_bound_check(&geom, &MetricField(&geom), 0.2, 1.0, &bgrid(&geom, 16, 32)).unwrap();
    assert!(a.ratio.is_finite() && b.ratio.is_finite());
    assert!((a.ratio - b.ratio).abs() < 1e-3 * a.ratio, "{} vs {}", a.ratio, b.ratio);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn matched_adjoint_is_exact(c in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let geom = Geometry::conformal_disk(1.0, 0.05);
            let ig = igrid(&geom, 16);
            let g = bgrid(&geom, 8, 8);
            let op = RayOperator::new(&geom, ig.clone(), g.clone(), 2, Mask::Support).unwrap();
            let cc = c.clone();
            let f = SymTensorField::sample(ig, &FnField::new(2, move |x| [cc[0] + cc[1] * x[0], cc[2] * x[1], cc[3]]).unwrap(), Mask::Support).unwrap();
            let w = XRaySamples::from_fn(g, 2, |s, t| c[4] * s.sin() + c[5] * t);
            let lhs = op.forward(&f).unwrap().inner(&w).unwrap();
            let rhs = f.inner(&op.adjoint(&w).unwrap(), Mask::Support).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }
    }
}
