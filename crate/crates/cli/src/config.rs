//! Run configuration: a TOML file with optional flag overrides.

use std::path::Path;

use mdif_core::io::sha256_hex;
use mdif_core::latent::LevelSpec;
use mdif_core::latopt::LatentOptConfig;
use mdif_core::metrics::{DEFAULT_SAMPLES, DEFAULT_TAU};
use mdif_core::net::{Ablations, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Which shapes `gen-data` produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Random CSG unions of primitives.
    Random,
    /// The fixed sphere ∪ box shape, repeated.
    SphereUnionBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shapes: usize,
    pub family: ShapeFamily,
    /// Resolution of the baked input grids.
    pub grid_res: usize,
    /// Size of each stored point set.
    pub points_per_set: usize,
    pub band: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            shapes: 10,
            family: ShapeFamily::Random,
            grid_res: 32,
            points_per_set: 20_000,
            band: mdif_core::sdf::NEAR_SURFACE_BAND,
            seed: 0,
        }
    }
}

/// Orbit camera used by `complete`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub size: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            azimuth_deg: 30.0,
            elevation_deg: 25.0,
            radius: 1.6,
            fov_y_deg: 50.0,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// F-score distance threshold.
    pub tau: f64,
    /// Surface samples per mesh.
    pub samples: usize,
    /// Resolution of reconstructed field grids.
    pub mesh_res: usize,
    /// Resolution of the analytic reference grid that is meshed for ground truth.
    pub gt_res: usize,
    /// Fresh uniform and near-surface samples for the SDF error.
    pub sdf_points: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            samples: DEFAULT_SAMPLES,
            mesh_res: 64,
            gt_res: 128,
            sdf_points: 5000,
            seed: 0,
        }
    }
}

/// Everything a command needs besides paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub latopt: LatentOptConfig,
    pub camera: CameraConfig,
    pub eval: EvalConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub levels: Option<String>,
    pub ablations: Ablations,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().replace('\n', " ")))
    }

    /// Reads the file (or defaults), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&crate::read_text(p)?)?,
            None => Self::default(),
        };
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(seed) = o.seed {
            self.data.seed = seed;
            self.model.seed = seed;
            self.latopt.seed = seed;
            self.eval.seed = seed;
        }
        if let Some(levels) = &o.levels {
            self.model.levels = levels.parse::<LevelSpec>()?;
        }
        let (a, f) = (&mut self.model.ablations, &o.ablations);
        a.no_residual |= f.no_residual;
        a.no_global_connection |= f.no_global_connection;
        a.no_dropout |= f.no_dropout;
        a.global_only |= f.global_only;
        a.local_only |= f.local_only;
        a.no_consistency |= f.no_consistency;
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.latopt.validate()?;
        let d = &self.data;
        if d.shapes == 0 || d.points_per_set == 0 {
            return Err(CliError::Config("data.shapes and data.points_per_set must be positive".into()));
        }
        if d.grid_res < 2 {
            return Err(CliError::Config("data.grid_res must be at least 2".into()));
        }
        let e = &self.eval;
        if !(e.tau > 0.0) || e.samples == 0 || e.mesh_res < 2 || e.gt_res < 2 || e.sdf_points == 0 {
            return Err(CliError::Config("eval settings must be positive".into()));
        }
        if self.camera.size == 0 {
            return Err(CliError::Config("camera.size must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Seeds of every stage, for manifests.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("data", self.data.seed),
            ("model", self.model.seed),
            ("latopt", self.latopt.seed),
            ("eval", self.eval.seed),
        ]
    }
}
