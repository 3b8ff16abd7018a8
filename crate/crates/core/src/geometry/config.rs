use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ConformalCoefficients, Family, Geometry, GridMetric};
use crate::error::Result;

fn one() -> f64 {
    1.0
}

fn tau() -> f64 {
    TAU
}

fn default_margin() -> f64 {
    0.1
}

/// Serialized form of a metric family, tagged by `family`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilySpec {
    FlatDisk {
        #[serde(default = "one")]
        radius: f64,
    },
    ConformalDisk {
        #[serde(default = "one")]
        radius: f64,
        c: f64,
        #[serde(default)]
        linear: [f64; 2],
    },
    HyperbolicCylinder {
        #[serde(default = "one")]
        half_width: f64,
        #[serde(default = "tau")]
        circumference: f64,
    },
    GridMetric {
        #[serde(default = "one")]
        radius: f64,
        /// CSV of `x,y,g11,g12,g22` rows, relative to the config file.
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    #[serde(flatten)]
    pub family: FamilySpec,
    #[serde(default = "default_margin")]
    pub extension_margin: f64,
}

impl GeometrySpec {
    /// Build the geometry; relative grid paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Geometry> {
        let family = match &self.family {
            FamilySpec::FlatDisk { radius } => Family::FlatDisk { radius: *radius },
            FamilySpec::ConformalDisk { radius, c, linear } => {
                Family::ConformalDisk { radius: *radius, coeffs: ConformalCoefficients { c: *c, linear: *linear } }
            }
            FamilySpec::HyperbolicCylinder { half_width, circumference } => {
                Family::HyperbolicCylinder { half_width: *half_width, circumference: *circumference }
            }
            FamilySpec::GridMetric { radius, path } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                Family::Grid { radius: *radius, metric: Arc::new(GridMetric::from_csv(&full)?) }
            }
        };
        Geometry::new(family, self.extension_margin)
    }
}
