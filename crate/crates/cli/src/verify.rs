use std::sync::Arc;

use clap::ValueEnum;
use lensrig_core::flow::{exit_record, integrate_geodesic, time_reversal_check, FlowOptions};
use lensrig_core::geometry::{Geometry, Manifold, PhasePoint, Point};
use lensrig_core::lens::{lens_compare, lens_dataset, scattering_isometry_check, variational_check, BoundaryBump};
use lensrig_core::tensors::{
    DirichletOps, Domain, FnField, InteriorGrid, Mask, SolveOptions, SymDerivative, SymTensorField,
};
use lensrig_core::xray::{
    boundary_grid, xray_adjoint_m, xray_m, BoundaryGrid, GridLayout, RayOperator, XRaySamples,
};
use serde::Serialize;
use serde_json::json;

use crate::commands::{santalo_report, Output};
use crate::config::Loaded;
use crate::error::CliError;
use crate::fields::boundary_vanishing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Flow,
    Santalo,
    Tensors,
    Xray,
    Lens,
    All,
}

/// One invariant: `value <= threshold` unless the check says otherwise.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

fn below(suite: &'static str, name: &'static str, value: f64, threshold: f64) -> Check {
    Check { suite, name, value, threshold, passed: value <= threshold }
}

/// Boundary points on a fixed low-discrepancy sequence.
fn boundary_points(geom: &Geometry, n: usize, theta_max: f64) -> Vec<(f64, f64)> {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    (0..n)
        .map(|k| {
            let s = geom.boundary_length() * (k as f64 + 0.5) / n as f64;
            let u = (k as f64 * phi).fract();
            (s, theta_max * (2.0 * u - 1.0))
        })
        .collect()
}

fn untrapped(geom: &Geometry, n: usize, opts: &FlowOptions) -> Result<Vec<(PhasePoint, f64)>, CliError> {
    let mut rays = Vec::new();
    for (s, th) in boundary_points(geom, n, 1.4) {
        let (y, _) = geom.phase_from_boundary(s, th)?;
        let d = exit_record(geom, &y, opts)?;
        if !d.trapped {
            rays.push((y, d.length));
        }
    }
    Ok(rays)
}

fn flow_suite(run: &Loaded, geom: &Geometry) -> Result<Vec<Check>, CliError> {
    let opts = run.config.flow();
    let raw = FlowOptions { renormalize: false, ..opts };
    let rays = untrapped(geom, 24, &opts)?;
    let (mut norm, mut clairaut, mut reversal) = (0.0f64, 0.0f64, 0.0f64);
    let mut has_clairaut = false;
    for (y, len) in &rays {
        let tr = integrate_geodesic(geom, y, *len, &raw)?;
        for (t, p) in tr.times.iter().zip(&tr.points) {
            let n = geom.metric_at(&p.x)?.norm(&p.v);
            norm = norm.max((n - 1.0).abs() / (1.0 + t));
        }
        if let Some(c0) = geom.clairaut(y) {
            has_clairaut = true;
            let tr = integrate_geodesic(geom, y, *len, &opts)?;
            for (t, p) in tr.times.iter().zip(&tr.points).skip(1) {
                if let Some(c) = geom.clairaut(p) {
                    clairaut = clairaut.max((c - c0).abs() / t.max(1.0));
                }
            }
        }
        reversal = reversal.max(time_reversal_check(geom, y, &opts)?.residual);
    }
    let mut checks = vec![
        below("flow", "untrapped_rays_missing", (24 - rays.len().min(24)) as f64, 12.0),
        below("flow", "unit_speed_drift", norm, 1e-9),
        below("flow", "time_reversal_residual", reversal, 1e-7),
    ];
    if has_clairaut {
        checks.push(below("flow", "clairaut_drift", clairaut, 1e-9));
    }
    Ok(checks)
}

fn santalo_suite(run: &Loaded, geom: &Geometry) -> Result<Vec<Check>, CliError> {
    let (tol, _, body) = santalo_report(run, geom)?;
    let rel = body["rel_err"].as_f64().unwrap_or(f64::NAN);
    Ok(vec![Check { suite: "santalo", name: "rel_err", value: rel, threshold: tol, passed: rel <= tol }])
}

fn interior(run: &Loaded, geom: &Geometry) -> Result<Arc<InteriorGrid>, CliError> {
    Ok(Arc::new(InteriorGrid::new(geom, run.config.grid.interior, geom.extension_margin())?))
}

fn trial_rank2() -> FnField {
    FnField::new(2, |x| {
        [0.4 + 0.7 * x[0] - 0.2 * x[1].sin(), 0.3 * x[0] * x[1] - 0.5, 0.9 + 0.2 * (2.0 * x[0]).cos() - 0.6 * x[1] * x[1]]
    })
    .expect("rank 2")
}

fn tensors_suite(run: &Loaded, geom: &Geometry) -> Result<Vec<Check>, CliError> {
    let ig = interior(run, geom)?;
    let ops = DirichletOps::new(ig.clone(), 1, Domain::Base)?;
    let f = SymTensorField::sample(ig.clone(), &trial_rank2(), Mask::Support)?;
    let d = ops.decompose(&f, None, SolveOptions::default())?;
    let fnorm = f.norm(Mask::Support);
    let dp = ops.apply(&d.p)?;
    let recon = dp.axpy(1.0, &d.f_s)?.axpy(-1.0, &f)?.max_abs(Mask::Support);
    let div = ops.adjoint(&d.f_s)?.norm(Mask::Inside) / fnorm;
    let orth = dp.inner(&d.f_s, Mask::Support)?.abs() / (fnorm * fnorm);
    let mut buf = Vec::new();
    d.f_s.write_csv(&mut buf)?;
    let back = SymTensorField::read_csv(ig, buf.as_slice())?;
    let exact = back.data() == d.f_s.data();
    Ok(vec![
        below("tensors", "reconstruction", recon, 1e-7),
        below("tensors", "divergence_of_solenoidal", div, 1e-6),
        below("tensors", "orthogonality", orth, 1e-6),
        Check { suite: "tensors", name: "csv_round_trip", value: if exact { 0.0 } else { 1.0 }, threshold: 0.0, passed: exact },
    ])
}

fn boundary(run: &Loaded, geom: &Geometry, n_s: usize, n_theta: usize) -> Result<Arc<BoundaryGrid>, CliError> {
    Ok(Arc::new(boundary_grid(geom, GridLayout::new(n_s, n_theta).with_flow(run.config.flow()))?))
}

/// Angular cutoff vanishing before the trapped fan, where ray lengths are singular.
#[derive(Clone, Copy)]
struct Taper(Option<f64>);

impl Taper {
    /// The fan is placed at the smallest `|theta|` of a trapped node or of a
    /// length maximum in a row whose length profile has more than one maximum.
    fn of(grid: &BoundaryGrid) -> Self {
        let nt = grid.layout.n_theta;
        let mut fan = f64::INFINITY;
        for i in 0..grid.layout.n_s {
            let len = |j: usize| grid.datum(grid.index(i, j)).length;
            let peaks: Vec<usize> =
                (1..nt.saturating_sub(1)).filter(|&j| len(j) > len(j - 1) && len(j) >= len(j + 1)).collect();
            if peaks.len() > 1 {
                fan = peaks.iter().map(|&j| grid.theta_node(j).abs()).fold(fan, f64::min);
            }
            for j in 0..nt {
                if grid.trapped(grid.index(i, j)) {
                    fan = fan.min(grid.theta_node(j).abs());
                }
            }
        }
        Taper(fan.is_finite().then_some(0.7 * fan))
    }

    fn at(self, theta: f64) -> f64 {
        match self.0 {
            None => 1.0,
            Some(c) => {
                let u = theta / c;
                if u.abs() < 1.0 {
                    (1.0 - 1.0 / (1.0 - u * u)).exp()
                } else {
                    0.0
                }
            }
        }
    }
}

fn compact_bump(x: &Point, radius: f64) -> f64 {
    let r2 = x.norm_squared() / (radius * radius);
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

fn xray_suite(run: &Loaded, geom: &Geometry) -> Result<Vec<Check>, CliError> {
    let g = &run.config.grid;
    let bg = boundary(run, geom, g.n_s, g.n_theta)?;
    let ig = interior(run, geom)?;
    let p = boundary_vanishing(geom);
    let dp = SymDerivative::new(geom, &p)?;
    let kernel = xray_m(geom, &dp, &bg)?.norm() / SymTensorField::sample(ig.clone(), &dp, Mask::Inside)?.norm(Mask::Inside);

    // Continuous duality against the fiber-quadrature adjoint, on a square grid.
    let n = g.interior;
    let sq = boundary(run, geom, n, n)?;
    let (lo, hi) = geom.chart().bounding_box();
    let mid = Point::new(0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]));
    let radius = 0.6 * geom.chart().size();
    let h = FnField::new(2, move |x| {
        let b = compact_bump(&(x - mid), radius);
        [b * (1.0 + x[0]), 0.5 * b * x[1], b * (0.3 - x[0] * x[1])]
    })?;
    let taper = Taper::of(&sq);
    let w = XRaySamples::from_fn(sq.clone(), 2, |s, th| {
        taper.at(th) * (s.cos() + 0.5 * (2.0 * s + th).sin() + th * th)
    });
    let lhs = xray_m(geom, &h, &sq)?.inner(&w)?;
    let hs = SymTensorField::sample(ig.clone(), &h, Mask::Inside)?;
    let iw = xray_adjoint_m(geom, &w, &ig, n, Mask::Inside)?;
    let duality = (lhs - hs.inner(&iw, Mask::Inside)?).abs() / (hs.norm(Mask::Inside) * w.norm());

    // The discretized operator and its transpose.
    let op = RayOperator::new(geom, ig.clone(), bg.clone(), 2, Mask::Support)?;
    let f = SymTensorField::sample(ig, &trial_rank2(), Mask::Support)?;
    let wb = XRaySamples::from_fn(bg, 2, |s, th| (3.0 * s).sin() + th);
    let a = op.forward(&f)?.inner(&wb)?;
    let b = f.inner(&op.adjoint(&wb)?, Mask::Support)?;
    let matched = (a - b).abs() / (f.norm(Mask::Support) * wb.norm());
    Ok(vec![
        below("xray", "potential_kernel", kernel, 1e-5),
        below("xray", "duality_error", duality, 1e-2),
        below("xray", "matched_adjoint", matched, 1e-12),
    ])
}

fn lens_suite(run: &Loaded, geom: &Geometry) -> Result<Vec<Check>, CliError> {
    let g = &run.config.grid;
    let layout = GridLayout::new(g.n_s, g.n_theta).with_flow(run.config.flow());
    let ds = lens_dataset(geom, layout)?;
    let self_cmp = lens_compare(&ds, &ds)?;
    let taper = Taper::of(&ds.grid);
    let f = move |s: f64, t: f64| {
        taper.at(t) * (1.0 + 0.5 * s.cos() + 0.3 * (2.0 * s).sin()) * (1.0 + 0.4 * t - 0.2 * t * t)
    };
    let iso = scattering_isometry_check(&ds.grid, f);
    let mut h = BoundaryBump::new(geom, 1.0, 0.3);
    h.traceless = [0.4, -0.2];
    let strict = FlowOptions { tol: run.config.tolerances.integrator.min(1e-11), ..run.config.flow() };
    let (mut worst, mut nodes) = (0.0f64, 0usize);
    for (s, th) in boundary_points(geom, 12, 1.3) {
        if let Ok(r) = variational_check(geom, &h, s, th, 1e-4, &strict) {
            worst = worst.max(r.abs_err / (1.0 + r.length));
            nodes += 1;
        }
    }
    Ok(vec![
        below("lens", "self_comparison", self_cmp.sup_length.max(self_cmp.sup_exit), 0.0),
        below("lens", "scattering_isometry", iso.rel_err, 1e-2),
        below("lens", "variation_nodes_missing", (12 - nodes) as f64, 6.0),
        below("lens", "first_variation", worst, 1e-4),
    ])
}

pub fn verify(run: &Loaded, suite: Suite, out: &Output) -> Result<bool, CliError> {
    let geom = run.geometry()?;
    let selected: Vec<Suite> = match suite {
        Suite::All => vec![Suite::Flow, Suite::Santalo, Suite::Tensors, Suite::Xray, Suite::Lens],
        s => vec![s],
    };
    let mut checks = Vec::new();
    for s in selected {
        checks.extend(match s {
            Suite::Flow => flow_suite(run, &geom)?,
            Suite::Santalo => santalo_suite(run, &geom)?,
            Suite::Tensors => tensors_suite(run, &geom)?,
            Suite::Xray => xray_suite(run, &geom)?,
            Suite::Lens => lens_suite(run, &geom)?,
            Suite::All => unreachable!("expanded above"),
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    out.json(
        "verify.json",
        json!({ "geometry": geom.label(), "suite": suite, "checks": checks, "passed": passed }),
    )?;
    Ok(passed)
}
