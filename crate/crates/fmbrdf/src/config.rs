//! JSON configuration consumed by the command-line tools. Every field has
//! a default, so the empty object `{}` is a complete config; unknown keys
//! are rejected rather than ignored. The schema carries a version number
//! and only version 1 exists.
//!
//! Directions are given as (not necessarily normalized) xyz triples;
//! anything angular elsewhere in the file format is in degrees, while the
//! library beneath works in radians.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineParams;
use crate::brdf::{FmbrdfParams, LightSource};
use crate::geometry::Direction;
use crate::reflectometry::{EvalMode, FitConfig};
use crate::scene::{NoiseSpec, SceneModel, SceneShape, SceneSpec};
use crate::surrogate::{TrainOptions, TRAIN_RULE};
use crate::{Error, Result};

const SCHEMA_VERSION: u32 = 1;

/// Root of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Schema version; must be 1.
    pub version: u32,
    pub scene: SceneConfig,
    pub fit: FitSection,
    pub training: TrainingSection,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            version: SCHEMA_VERSION,
            scene: SceneConfig::default(),
            fit: FitSection::default(),
            training: TrainingSection::default(),
        }
    }
}

impl Config {
    pub fn from_str(text: &str) -> Result<Config> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        if cfg.version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "config version {} unsupported, expected {SCHEMA_VERSION}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let mut text = String::new();
        use std::io::Read as _;
        BufReader::new(File::open(path)?).read_to_string(&mut text)?;
        Config::from_str(&text)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeConfig {
    Sphere,
    Plane,
}

/// Scene section. Default: a 96x96 sphere of the reference material under
/// a slightly tilted unit light, viewed straight down the z axis, no noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub shape: ShapeConfig,
    pub width: u32,
    pub height: u32,
    /// View axis, surface toward camera.
    pub view: [f64; 3],
    /// Light axis, surface toward source.
    pub light: [f64; 3],
    /// Source irradiance.
    pub e0: f64,
    pub model: ModelConfig,
    /// Gaussian sigma on the four filter intensities, absolute radiance
    /// units; 0 disables noise.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            shape: ShapeConfig::Sphere,
            width: 96,
            height: 96,
            view: [0.0, 0.0, 1.0],
            light: [0.4, 0.1, 0.91],
            e0: 1.0,
            model: ModelConfig::Fmbrdf(FmbrdfParams::default()),
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Reflectance model selector, tagged by model name:
/// `"model": {"fmbrdf": { ... }}` or `{"lambertian": { ... }}` and so on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Fmbrdf(FmbrdfParams),
    Lambertian(AlbedoConfig),
    OrenNayar(RoughDiffuseConfig),
    TorranceSparrow(SpecularConfig),
    PbrdfFlat(FlatConfig),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlbedoConfig {
    /// Diffuse albedo.
    pub albedo: f64,
}

impl Default for AlbedoConfig {
    fn default() -> AlbedoConfig {
        AlbedoConfig { albedo: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoughDiffuseConfig {
    pub albedo: f64,
    /// Facet slope deviation, radians.
    pub sigma: f64,
}

impl Default for RoughDiffuseConfig {
    fn default() -> RoughDiffuseConfig {
        RoughDiffuseConfig {
            albedo: 0.5,
            sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecularConfig {
    pub ks: f64,
    /// Roughness scale, radians.
    pub sigma: f64,
    pub mu: f64,
}

impl Default for SpecularConfig {
    fn default() -> SpecularConfig {
        SpecularConfig {
            ks: 0.3,
            sigma: 0.3,
            mu: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatConfig {
    pub mu: f64,
    pub kd: f64,
    pub ks: f64,
    /// Roughness scale of the specular lobe, radians.
    pub sigma: f64,
}

impl Default for FlatConfig {
    fn default() -> FlatConfig {
        FlatConfig {
            mu: 1.5,
            kd: 0.5,
            ks: 0.3,
            sigma: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn to_scene_model(self) -> SceneModel {
        match self {
            ModelConfig::Fmbrdf(p) => SceneModel::Fmbrdf(p),
            ModelConfig::Lambertian(c) => {
                SceneModel::Baseline(BaselineParams::Lambertian { albedo: c.albedo })
            }
            ModelConfig::OrenNayar(c) => SceneModel::Baseline(BaselineParams::OrenNayar {
                albedo: c.albedo,
                sigma: c.sigma,
            }),
            ModelConfig::TorranceSparrow(c) => {
                SceneModel::Baseline(BaselineParams::TorranceSparrow {
                    ks: c.ks,
                    sigma: c.sigma,
                    mu: c.mu,
                })
            }
            ModelConfig::PbrdfFlat(c) => SceneModel::Baseline(BaselineParams::PbrdfFlat {
                mu: c.mu,
                kd: c.kd,
                ks: c.ks,
                sigma: c.sigma,
            }),
        }
    }
}

fn direction(v: [f64; 3], what: &str) -> Result<Direction> {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(norm.is_finite() && norm > 1e-9) {
        return Err(Error::Format(format!(
            "{what} direction {v:?} cannot be normalized"
        )));
    }
    Ok(Direction::new(v[0], v[1], v[2]))
}

impl SceneConfig {
    pub fn to_scene_spec(&self) -> Result<SceneSpec> {
        let spec = SceneSpec {
            shape: match self.shape {
                ShapeConfig::Sphere => SceneShape::Sphere,
                ShapeConfig::Plane => SceneShape::Plane,
            },
            width: self.width,
            height: self.height,
            v: direction(self.view, "view")?,
            light: LightSource::unpolarized(direction(self.light, "light")?, self.e0),
            model: self.model.to_scene_model(),
            noise: NoiseSpec {
                sigma: self.noise_sigma,
                seed: self.noise_seed,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Fit section. Defaults mirror the library's fit defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// "surrogate" or "oracle".
    pub mode: EvalMode,
    pub iterations: usize,
    /// Adam step size in the unconstrained parameterization.
    pub step: f64,
    /// DoLP outlier threshold in median absolute deviations.
    pub outlier_mads: f64,
    pub multi_start: bool,
    pub seed: u64,
    /// Keep the DoLP residual in the objective.
    pub polarization: bool,
    /// Quadrature for oracle-mode fitting.
    pub oracle_res: [usize; 2],
    /// Starting material.
    pub init: FmbrdfParams,
}

impl Default for FitSection {
    fn default() -> FitSection {
        let lib = FitConfig::default();
        FitSection {
            mode: lib.mode,
            iterations: lib.iterations,
            step: lib.step,
            outlier_mads: lib.outlier_mads,
            multi_start: lib.multi_start,
            seed: lib.seed,
            polarization: lib.polarization,
            oracle_res: [lib.oracle_res.0, lib.oracle_res.1],
            init: lib.init,
        }
    }
}

impl FitSection {
    pub fn to_fit_config(&self) -> FitConfig {
        FitConfig {
            init: self.init,
            mode: self.mode,
            step: self.step,
            iterations: self.iterations,
            outlier_mads: self.outlier_mads,
            oracle_res: (self.oracle_res[0], self.oracle_res[1]),
            multi_start: self.multi_start,
            seed: self.seed,
            polarization: self.polarization,
            ..FitConfig::default()
        }
    }
}

/// Surrogate training section. Defaults are the shipped training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub n_samples: usize,
    /// Quadrature of the data-generating oracle, polar x azimuthal.
    pub rule: [usize; 2],
    pub seed: u64,
    pub body_hidden: Vec<usize>,
    pub body_epochs: usize,
    pub smith_epochs: usize,
    pub smith_materials: usize,
}

impl Default for TrainingSection {
    fn default() -> TrainingSection {
        let lib = TrainOptions::default();
        TrainingSection {
            n_samples: lib.n_samples,
            rule: [TRAIN_RULE.0, TRAIN_RULE.1],
            seed: lib.seed,
            body_hidden: lib.body_hidden,
            body_epochs: lib.body_epochs,
            smith_epochs: lib.smith_epochs,
            smith_materials: lib.smith_materials,
        }
    }
}

impl TrainingSection {
    pub fn to_train_options(&self) -> TrainOptions {
        TrainOptions {
            n_samples: self.n_samples,
            rule: (self.rule[0], self.rule[1]),
            seed: self.seed,
            body_hidden: self.body_hidden.clone(),
            body_epochs: self.body_epochs,
            smith_epochs: self.smith_epochs,
            smith_materials: self.smith_materials,
        }
    }
}
