use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldConfig;
use crate::pointguide::{BiasRouting, FilterConfig};
use crate::projection::PcConfig;
use crate::renderer::RenderConfig;
use crate::scenegen::{SceneConfig, SceneKind};

/// Which loss terms a run optimizes; one variant per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Rendering and Eikonal terms only.
    Base,
    /// Plus the plain zero-SDF point loss.
    NaivePg,
    /// Naive point loss plus photometric consistency.
    ModelA,
    /// Uncertainty-weighted point loss.
    ModelB,
    /// Uncertainty-weighted point loss plus photometric consistency.
    ModelC,
    /// Model C plus the bias network on filtered points.
    Full,
}

/// Enabled loss terms beyond rendering and Eikonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Terms {
    pub sdf: bool,
    pub usdf: bool,
    pub pc: bool,
    pub bias: bool,
}

impl Terms {
    pub fn uses_points(&self) -> bool {
        self.sdf || self.usdf || self.pc || self.bias
    }
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Base,
        Mode::NaivePg,
        Mode::ModelA,
        Mode::ModelB,
        Mode::ModelC,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::NaivePg => "naive_pg",
            Mode::ModelA => "model_a",
            Mode::ModelB => "model_b",
            Mode::ModelC => "model_c",
            Mode::Full => "full",
        }
    }

    pub fn terms(self) -> Terms {
        let (sdf, usdf, pc, bias) = match self {
            Mode::Base => (false, false, false, false),
            Mode::NaivePg => (true, false, false, false),
            Mode::ModelA => (true, false, true, false),
            Mode::ModelB => (false, true, false, false),
            Mode::ModelC => (false, true, true, false),
            Mode::Full => (false, true, true, true),
        };
        Terms { sdf, usdf, pc, bias }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected one of base, naive_pg, model_a, model_b, model_c, full)")))
    }
}

/// Weights of the point loss, the bias loss and the photometric loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lambdas {
    pub point: f64,
    pub bias: f64,
    pub pc: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            point: 1.0,
            bias: 1.0,
            pc: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub rays: usize,
    pub points: usize,
    pub lr: f64,
    /// Fraction of `steps` spent in linear learning-rate warmup.
    pub lr_warmup: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub lambda: Lambdas,
    pub filter: FilterConfig,
    pub bias_routing: BiasRouting,
    pub pc: PcConfig,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Record loss curves every this many steps.
    pub log_every: usize,
    pub divergence: DivergenceConfig,
    pub point_residual: PointResidual,
    /// Run in 64-bit floating point.
    pub f64: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            seed: 0,
            steps: 10_000,
            rays: 512,
            points: 1024,
            lr: 5e-4,
            lr_warmup: 0.02,
            lr_floor: 0.05,
            lambda: Lambdas::default(),
            filter: FilterConfig::default(),
            bias_routing: BiasRouting::default(),
            pc: PcConfig::default(),
            checkpoint_every: 0,
            log_every: 10,
            divergence: DivergenceConfig::default(),
            point_residual: PointResidual::default(),
            f64: false,
        }
    }
}

/// Abort when the total loss stays above `factor` times the magnitude of its
/// value at `reference_step` for `patience` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub factor: f64,
    pub patience: usize,
    pub reference_step: usize,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            factor: 10.0,
            patience: 500,
            reference_step: 100,
        }
    }
}

/// Residual the uncertainty-weighted point loss regresses to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointResidual {
    /// The SDF value `f`.
    Raw,
    /// `f / |grad f|`, the first-order distance to the zero set.
    #[default]
    GradNormalized,
}

/// Which field the evaluation mesh is extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshField {
    /// The rendered SDF.
    #[default]
    Base,
    /// Base SDF plus the bias network.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub resolution: usize,
    /// Surface samples on each side of the Chamfer distance.
    pub points: usize,
    pub mesh_field: MeshField,
    /// Views rendered for the depth error, evenly spaced over the rig.
    pub depth_views: usize,
    pub render_chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            points: 100_000,
            mesh_field: MeshField::Base,
            depth_views: 2,
            render_chunk: 1024,
        }
    }
}

/// Everything one reconstruction run needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory written by `gen-scene`; generated from `scene` when absent.
    pub data: Option<PathBuf>,
    pub scene: SceneConfig,
    pub fields: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        self.train.filter.validate(self.fields.sigma0_sq)?;
        self.train.pc.validate()?;
        self.scene.noise.validate()?;
        if t.steps == 0 || t.rays == 0 || t.points == 0 || t.log_every == 0 {
            return Err(Error::Config("steps, rays, points and log_every must be positive".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.lr_warmup) || !(0.0..=1.0).contains(&t.lr_floor) {
            return Err(Error::Config(format!("invalid learning-rate schedule ({}, {}, {})", t.lr, t.lr_warmup, t.lr_floor)));
        }
        let l = t.lambda;
        if ![l.point, l.bias, l.pc].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {l:?}")));
        }
        if self.render.n_coarse < 2 {
            return Err(Error::Config("at least two coarse samples per ray are needed".into()));
        }
        if self.eval.resolution < 16 || self.eval.points == 0 || self.eval.render_chunk == 0 {
            return Err(Error::Config("eval resolution must be >= 16 and points, render_chunk positive".into()));
        }
        Ok(())
    }

    /// Quick preset: 8 views at 64 x 64, 20k points, small networks and
    /// sample counts, 3000 steps.
    pub fn ci() -> Self {
        Self {
            data: None,
            scene: SceneConfig {
                kind: SceneKind::Sphere,
                ..SceneConfig::ci()
            },
            fields: FieldConfig {
                pos_bands: 4,
                dir_bands: 2,
                sdf_hidden: 32,
                sdf_layers: 3,
                fea_dim: 16,
                bias_hidden: 32,
                bias_layers: 2,
                color_hidden: 32,
                color_layers: 2,
                ..FieldConfig::default()
            },
            render: RenderConfig {
                n_coarse: 16,
                n_importance: 16,
                ..RenderConfig::default()
            },
            train: TrainConfig {
                steps: 3000,
                rays: 128,
                points: 256,
                lr: 2e-3,
                filter: FilterConfig {
                    warmup_steps: 500,
                    ..FilterConfig::default()
                },
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                resolution: 64,
                points: 20_000,
                depth_views: 1,
                ..EvalConfig::default()
            },
        }
    }
}
