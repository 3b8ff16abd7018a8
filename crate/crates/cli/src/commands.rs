use std::path::{Path, PathBuf};
use std::sync::Arc;

use lensrig_core::geometry::{convexity_audit, Geometry, Manifold};
use lensrig_core::lens::lens_dataset;
use lensrig_core::tensors::{DirichletOps, Domain, InteriorGrid, Mask, SolveOptions, SymTensorField};
use lensrig_core::trapped::{escape_rate_fit, santalo_compare, FitWindow, LiouvilleSample, SantaloQuadrature};
use lensrig_core::xray::{
    boundary_grid, invert_cg, xray_m, BoundaryGrid, GridLayout, InversionOptions, RayOperator, Regularization,
    XRaySamples,
};
use lensrig_core::LensError;
use serde_json::{json, Value};

use crate::config::Loaded;
use crate::error::CliError;
use crate::fields::Builtin;

/// Destination for the artifacts of one command.
pub struct Output {
    dir: PathBuf,
    hash: String,
    command: &'static str,
}

impl Output {
    pub fn create(dir: PathBuf, hash: &str, command: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Write { path: dir.clone(), source })?;
        Ok(Self { dir, hash: hash.to_string(), command })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| CliError::Write { path, source })
    }

    pub fn csv(
        &self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> lensrig_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    /// Writes `body` with the command name and config hash added.
    pub fn json(&self, name: &str, mut body: Value) -> Result<(), CliError> {
        if let Value::Object(map) = &mut body {
            map.insert("command".into(), json!(self.command));
            map.insert("config_hash".into(), json!(self.hash));
        }
        let mut text = serde_json::to_string_pretty(&body).map_err(LensError::from)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

fn layout(run: &Loaded) -> GridLayout {
    let g = &run.config.grid;
    GridLayout::new(g.n_s, g.n_theta).with_flow(run.config.flow())
}

fn boundary(run: &Loaded, geom: &Geometry) -> Result<Arc<BoundaryGrid>, CliError> {
    Ok(Arc::new(boundary_grid(geom, layout(run))?))
}

pub fn audit(run: &Loaded, out: &Output) -> Result<bool, CliError> {
    let geom = run.geometry()?;
    let r = convexity_audit(&geom, run.config.audit.samples)?;
    out.json(
        "audit.json",
        json!({
            "geometry": geom.label(),
            "min_II": r.min_second_fundamental_form,
            "curvature_min": r.curvature_min,
            "curvature_max": r.curvature_max,
            "spd_margin": r.spd_margin,
            "samples": r.samples,
            "passed": r.passed,
        }),
    )?;
    Ok(r.passed)
}

pub fn lens(run: &Loaded, out: &Output) -> Result<bool, CliError> {
    let geom = run.geometry()?;
    let ds = lens_dataset(&geom, layout(run))?;
    out.csv("lens.csv", |w| ds.write_csv(w))?;
    let failed = (0..ds.grid.len()).filter(|&k| ds.grid.failed(k)).count();
    out.json(
        "lens.json",
        json!({
            "geometry": geom.label(),
            "rows": ds.grid.len(),
            "trapped": ds.grid.trapped_count(),
            "failed": failed,
            "untrapped_fraction": ds.untrapped_fraction,
            "boundary_length": ds.boundary_length,
        }),
    )?;
    Ok(failed == 0)
}

pub fn santalo(run: &Loaded, out: &Output) -> Result<bool, CliError> {
    let geom = run.geometry()?;
    let (tol, passed, body) = santalo_report(run, &geom)?;
    out.json("santalo.json", json!({ "geometry": geom.label(), "threshold": tol, "passed": passed, "report": body }))?;
    Ok(passed)
}

/// Santalo comparison for the constant integrand.
pub fn santalo_report(run: &Loaded, geom: &Geometry) -> Result<(f64, bool, Value), CliError> {
    let s = &run.config.santalo;
    let quad = SantaloQuadrature { n_s: s.n_s, n_theta: s.n_theta, n_interior: s.n_interior };
    let one = |_: &_, _: &_| Ok(1.0);
    let r = santalo_compare(geom, &one, quad, &run.config.flow(), None)?;
    let tol = run.config.tolerances.santalo;
    let passed = r.rel_err <= tol;
    Ok((tol, passed, serde_json::to_value(&r).map_err(LensError::from)?))
}

pub fn escape(run: &Loaded, out: &Output) -> Result<bool, CliError> {
    let seed = run.seed()?;
    let geom = run.geometry()?;
    let e = &run.config.escape;
    let n = (e.t_max / e.dt).round() as usize;
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * e.dt).collect();
    let sample = LiouvilleSample::draw(&geom, e.samples, seed, &run.config.flow())?;
    let curve = sample.curve(&times)?;
    out.csv("escape.csv", |w| curve.write_csv(w))?;
    let window = match e.window {
        Some([t0, t1]) => FitWindow::Fixed { t0, t1 },
        None => FitWindow::Auto { transient: geom.diameter_estimate(), min_hits: e.min_hits },
    };
    match escape_rate_fit(&curve, window) {
        Ok(fit) => {
            let passed = e.q_range.map_or(true, |[lo, hi]| (lo..=hi).contains(&fit.q_hat));
            let mut body = fit.to_json();
            body["passed"] = json!(passed);
            body["samples"] = json!(e.samples);
            body["seed"] = json!(seed);
            out.json("fit.json", body)?;
            Ok(passed)
        }
        Err(LensError::InsufficientDecade) => {
            out.json(
                "fit.json",
                json!({
                    "error": "InsufficientDecade",
                    "message": LensError::InsufficientDecade.to_string(),
                    "passed": false,
                    "samples": e.samples,
                    "seed": seed,
                }),
            )?;
            Ok(false)
        }
        Err(err) => Err(err.into()),
    }
}

pub fn xray(run: &Loaded, out: &Output) -> Result<bool, CliError> {
    let spec = run.config.field.ok_or_else(|| CliError::Config("xray needs a [field] section".into()))?;
    let geom = run.geometry()?;
    let grid = boundary(run, &geom)?;
    let field = Builtin::new(spec, &geom)?;
    let samples = xray_m(&geom, &field, &grid)?;
    out.csv("xray.csv", |w| samples.write_csv(w))?;
    let failed = (0..grid.len()).filter(|&k| grid.failed(k)).count();
    out.json(
        "xray.json",
        json!({
            "geometry": geom.label(),
            "field": spec,
            "rank": spec.rank(),
            "nodes": grid.len(),
            "trapped": grid.trapped_count(),
            "failed": failed,
            "norm": samples.norm(),
        }),
    )?;
    Ok(failed == 0)
}

fn read_samples(path: &Path, grid: Arc<BoundaryGrid>) -> Result<XRaySamples, CliError> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    Ok(XRaySamples::read_csv(grid, 2, std::io::BufReader::new(file))?)
}

pub fn invert(run: &Loaded, out: &Output) -> Result<bool, CliError> {
    let cfg = &run.config;
    let inv = &cfg.invert;
    if let Some(spec) = cfg.field {
        if spec.rank() != 2 {
            return Err(CliError::Config(format!("invert reconstructs rank-2 fields, [field] has rank {}", spec.rank())));
        }
    }
    let data_path = inv.data.as_ref().map(|p| run.resolve(p));
    // Fail on a missing data file before any tracing.
    if let Some(p) = &data_path {
        std::fs::metadata(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
    }
    let geom = run.geometry()?;
    let grid = boundary(run, &geom)?;
    let truth_field = cfg.field.map(|spec| Builtin::new(spec, &geom)).transpose()?;
    let data = match (&data_path, &truth_field) {
        (Some(p), _) => read_samples(p, grid.clone())?,
        (None, Some(f)) => xray_m(&geom, f, &grid)?,
        (None, None) => return Err(CliError::Config("invert needs invert.data or a [field] section".into())),
    };
    let (data, sigma) = if inv.noise > 0.0 { data.with_noise(inv.noise, run.seed()?) } else { (data, 0.0) };
    let regularization = match inv.lambda {
        Some(l) => Regularization::Fixed(l),
        None if inv.noise > 0.0 => Regularization::discrepancy(sigma),
        None => Regularization::Fixed(0.0),
    };
    let interior = Arc::new(InteriorGrid::new(&geom, cfg.grid.interior, geom.extension_margin())?);
    let op = RayOperator::new(&geom, interior.clone(), grid, 2, Mask::Support)?;
    let dir = DirichletOps::new(interior.clone(), 1, Domain::Base)?;
    let truth = match &truth_field {
        Some(f) => Some(SymTensorField::sample(interior, f, Mask::Support)?),
        None => None,
    };
    let opts = InversionOptions {
        regularization,
        tol: cfg.tolerances.cg,
        max_iter: inv.max_iter,
        projection: SolveOptions { tol: 1e-10, max_iter: 5000 },
    };
    let result = invert_cg(&op, &dir, &data, truth.as_ref(), &opts)?;
    out.csv("field.csv", |w| result.field.write_csv(w))?;
    let r = &result.report;
    let within = match (inv.max_error, r.l2_error_if_known) {
        (Some(max), Some(e)) => e <= max,
        _ => true,
    };
    let passed = r.converged && within;
    let mut body = r.to_json();
    body["converged"] = json!(r.converged);
    body["misfit"] = json!(r.misfit);
    body["divergence_ratio"] = json!(r.divergence_ratio);
    body["max_error"] = json!(inv.max_error);
    body["noise"] = json!(inv.noise);
    body["passed"] = json!(passed);
    out.json("invert.json", body)?;
    Ok(passed)
}
