use std::path::{Path, PathBuf};

use lensrig_core::flow::FlowOptions;
use lensrig_core::geometry::{Geometry, GeometrySpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

fn default_t_cap() -> f64 {
    200.0
}

/// One experiment: geometry, discretization, tolerances and per-command settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_t_cap")]
    pub t_cap: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub santalo: SantaloConfig,
    #[serde(default)]
    pub escape: EscapeConfig,
    #[serde(default)]
    pub field: Option<FieldSpec>,
    #[serde(default)]
    pub invert: InvertConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_s: usize,
    pub n_theta: usize,
    /// Interior nodes per side.
    pub interior: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n_s: 64, n_theta: 32, interior: 48 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub integrator: f64,
    pub exit: f64,
    pub cg: f64,
    /// Pass threshold for the Santalo relative error.
    pub santalo: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { integrator: 1e-10, exit: 1e-13, cg: 1e-5, santalo: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub samples: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { samples: 400 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SantaloConfig {
    pub n_s: usize,
    pub n_theta: usize,
    pub n_interior: usize,
}

impl Default for SantaloConfig {
    fn default() -> Self {
        Self { n_s: 64, n_theta: 128, n_interior: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EscapeConfig {
    pub samples: usize,
    pub dt: f64,
    pub t_max: f64,
    /// Fixed fit window; by default the window is chosen from the data.
    pub window: Option<[f64; 2]>,
    pub min_hits: usize,
    /// Accepted range for the fitted rate.
    pub q_range: Option<[f64; 2]>,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        Self { samples: 100_000, dt: 0.25, t_max: 20.0, window: None, min_hits: 30, q_range: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvertConfig {
    /// X-ray samples CSV, relative to the config file. Without it the data are
    /// the transform of `field`.
    pub data: Option<PathBuf>,
    /// Relative noise level added to the data.
    pub noise: f64,
    /// Fixed Tikhonov weight; the discrepancy principle is used under noise otherwise.
    pub lambda: Option<f64>,
    pub max_iter: usize,
    /// Accepted relative L2 error when the truth is known.
    pub max_error: Option<f64>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self { data: None, noise: 0.0, lambda: None, max_iter: 400, max_error: None }
    }
}

/// Built-in tensor fields for the transform and inversion commands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero {
        #[serde(default = "two")]
        rank: usize,
    },
    /// The constant function one; its transform is the ray length.
    One,
    Metric,
    /// `Re/Im z^k` trace-free field.
    Holomorphic {
        #[serde(default = "two_i32")]
        k: i32,
    },
    HolomorphicPlusMetric {
        #[serde(default = "two_i32")]
        k: i32,
    },
    /// Symmetric derivative of a 1-form vanishing on the boundary.
    Potential,
}

fn two() -> usize {
    2
}

fn two_i32() -> i32 {
    2
}

impl FieldSpec {
    pub fn rank(&self) -> usize {
        match self {
            FieldSpec::Zero { rank } => *rank,
            FieldSpec::One => 0,
            _ => 2,
        }
    }
}

/// A parsed config with its provenance.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub hash: String,
}

impl Loaded {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if seed.is_some() {
            config.seed = seed;
        }
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let hash = config.hash();
        Ok(Self { config, base_dir, hash })
    }

    pub fn geometry(&self) -> Result<Geometry, CliError> {
        self.config.geometry.build(&self.base_dir).map_err(|e| match e {
            lensrig_core::LensError::Io(source) => CliError::Io { path: self.grid_path(), source },
            e => CliError::Core(e),
        })
    }

    fn grid_path(&self) -> PathBuf {
        match &self.config.geometry.family {
            lensrig_core::geometry::FamilySpec::GridMetric { path, .. } => self.resolve(path),
            _ => PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self, cli: Option<&Path>) -> PathBuf {
        match (cli, &self.config.out) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => PathBuf::from("out"),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.config.seed.ok_or_else(|| CliError::Config("this command needs a seed (config `seed` or --seed)".into()))
    }
}

impl RunConfig {
    pub fn flow(&self) -> FlowOptions {
        FlowOptions { exit_tol: self.tolerances.exit, ..FlowOptions::new(self.tolerances.integrator, self.t_cap) }
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let t = &self.tolerances;
        if !(1e-13..=1e-6).contains(&t.integrator) {
            return bad(format!("tolerances.integrator = {} outside [1e-13, 1e-6]", t.integrator));
        }
        if !(1e-15..=1e-8).contains(&t.exit) {
            return bad(format!("tolerances.exit = {} outside [1e-15, 1e-8]", t.exit));
        }
        if !(t.cg > 0.0 && t.cg <= 1e-2) {
            return bad(format!("tolerances.cg = {} outside (0, 1e-2]", t.cg));
        }
        if !(t.santalo > 0.0 && t.santalo < 1.0) {
            return bad(format!("tolerances.santalo = {} outside (0, 1)", t.santalo));
        }
        if !(self.t_cap > 0.0 && self.t_cap.is_finite()) {
            return bad(format!("t_cap = {} must be positive", self.t_cap));
        }
        let g = &self.grid;
        if g.n_s < 4 || g.n_theta < 2 || g.interior < 8 {
            return bad("grid needs n_s >= 4, n_theta >= 2, interior >= 8".into());
        }
        let s = &self.santalo;
        if s.n_s == 0 || s.n_theta == 0 || s.n_interior == 0 {
            return bad("santalo quadrature sizes must be positive".into());
        }
        let e = &self.escape;
        if !(e.dt > 0.0 && e.t_max > e.dt) || e.samples == 0 {
            return bad("escape needs samples > 0 and 0 < dt < t_max".into());
        }
        if let Some(w) = e.window {
            if !(w[0] < w[1]) {
                return bad(format!("escape.window [{}, {}] is empty", w[0], w[1]));
            }
        }
        let inv = &self.invert;
        if !(inv.noise >= 0.0) || inv.lambda.is_some_and(|l| !(l >= 0.0)) || inv.max_iter == 0 {
            return bad("invert needs noise >= 0, lambda >= 0 and max_iter > 0".into());
        }
        if let Some(f) = &self.field {
            if f.rank() > 2 {
                return bad(format!("field rank {} must be 0, 1 or 2", f.rank()));
            }
        }
        if self.audit.samples == 0 {
            return bad("audit.samples must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> RunConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("[geometry]\nfamily = \"flat_disk\"\n");
        assert_eq!(c.grid.n_s, 64);
        assert_eq!(c.t_cap, 200.0);
        assert!(c.seed.is_none() && c.field.is_none());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[geometry]\nfamily = \"flat_disk\"\n[grid]\nns = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("speed = 1\n[geometry]\nfamily = \"flat_disk\"\n").is_err());
    }

    #[test]
    fn tolerance_ranges_are_enforced() {
        let mut c = parse("[geometry]\nfamily = \"flat_disk\"\n");
        c.tolerances.integrator = 1e-3;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = parse("[geometry]\nfamily = \"flat_disk\"\n");
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = Some(3);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn field_specs_parse() {
        let c = parse("[geometry]\nfamily = \"flat_disk\"\n[field]\nkind = \"holomorphic_plus_metric\"\nk = 3\n");
        assert_eq!(c.field, Some(FieldSpec::HolomorphicPlusMetric { k: 3 }));
        assert_eq!(c.field.unwrap().rank(), 2);
    }
}
