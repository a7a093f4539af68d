use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{camera_rig, downsample_interval, render_ground_truth, sample_point_cloud, NoiseModel, RigConfig};
use super::shapes::{AnalyticScene, SceneKind, Texture};
use crate::error::{Error, Result};
use crate::pointguide::PointBatch;
use crate::renderer::{Camera, ColorImage, DepthMap, Vec3};
use crate::rng::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub seed: u64,
    pub rig: RigConfig,
    /// Points drawn before downsampling.
    pub points: usize,
    /// Keep every `downsample`-th point.
    pub downsample: usize,
    pub noise: NoiseModel,
    pub background: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Composite,
            seed: 0,
            rig: RigConfig::default(),
            points: 100_000,
            downsample: 1,
            noise: NoiseModel::default(),
            background: [1.0; 3],
        }
    }
}

impl SceneConfig {
    /// Smaller rig and cloud for quick runs: 8 views at 64 x 64, 20k points.
    pub fn ci() -> Self {
        Self {
            rig: RigConfig {
                views: 8,
                resolution: 64,
                ..RigConfig::default()
            },
            points: 20_000,
            ..Self::default()
        }
    }
}

/// Everything a reconstruction run consumes, plus the analytic scene for
/// evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: AnalyticScene,
    pub cameras: Vec<Camera>,
    /// 8-bit quantized colors, identical before and after a disk round trip.
    pub images: Vec<ColorImage>,
    pub depths: Vec<DepthMap>,
    pub points: PointBatch,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig) -> Result<Self> {
        cfg.noise.validate()?;
        if cfg.downsample == 0 {
            return Err(Error::Config("downsample must be at least 1".into()));
        }
        let scene = AnalyticScene {
            shape: cfg.kind.shape(),
            texture: Texture::procedural(mix_seed(cfg.seed, 1)),
        };
        let cameras = camera_rig(&cfg.rig)?;
        let renders: Vec<(ColorImage, DepthMap)> = cameras
            .par_iter()
            .map(|c| render_ground_truth(&scene, c, cfg.background))
            .collect();
        let (images, depths): (Vec<_>, Vec<_>) = renders.into_iter().map(|(c, d)| (c.quantized(), d)).unzip();
        let cloud = sample_point_cloud(&scene, &cameras, &depths, cfg.points, &cfg.noise, mix_seed(cfg.seed, 2))?;
        let points = downsample_interval(&cloud, cfg.downsample)?;
        Ok(Self {
            scene,
            cameras,
            images,
            depths,
            points,
        })
    }

    /// Writes `cameras.txt`, `images/view_%03d.png`, `depth/view_%03d.f32`,
    /// `points.ply` and `scene.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("depth"))?;
        fs::write(dir.join("cameras.txt"), format_cameras(&self.cameras))?;
        for (v, (img, depth)) in self.images.iter().zip(&self.depths).enumerate() {
            img.write_png(&dir.join(format!("images/view_{v:03}.png")))?;
            depth.write(&dir.join(format!("depth/view_{v:03}.f32")))?;
        }
        self.points.write_ply(&dir.join("points.ply"))?;
        let scene = serde_json::to_string_pretty(&self.scene).map_err(|e| Error::InvalidInput(e.to_string()))?;
        fs::write(dir.join("scene.json"), scene)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("cameras.txt");
        let cameras = parse_cameras(&fs::read_to_string(&path)?, &path)?;
        let mut images = Vec::with_capacity(cameras.len());
        let mut depths = Vec::with_capacity(cameras.len());
        for v in 0..cameras.len() {
            images.push(ColorImage::read_png(&dir.join(format!("images/view_{v:03}.png")))?);
            depths.push(DepthMap::read(&dir.join(format!("depth/view_{v:03}.f32")))?);
        }
        let points = PointBatch::read_ply(&dir.join("points.ply"))?;
        points.check_views(cameras.len())?;
        let scene_path = dir.join("scene.json");
        let scene = serde_json::from_str(&fs::read_to_string(&scene_path)?).map_err(|e| Error::Format {
            kind: "scene",
            path: scene_path.clone(),
            detail: e.to_string(),
        })?;
        Ok(Self {
            scene,
            cameras,
            images,
            depths,
            points,
        })
    }
}

/// One camera per line: `fx fy cx cy W H` then the 3 x 4 matrix `[R | C]`
/// row-major, `R` world-from-camera and `C` the center.
pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut s = String::from("# fx fy cx cy W H r00 r01 r02 c0 r10 r11 r12 c1 r20 r21 r22 c2\n");
    for c in cameras {
        let _ = write!(s, "{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
        for r in 0..3 {
            for k in 0..3 {
                let _ = write!(s, " {}", c.rotation[(r, k)]);
            }
            let _ = write!(s, " {}", c.center[r]);
        }
        s.push('\n');
    }
    s
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let bad = |line: usize, detail: String| Error::Format {
        kind: "cameras",
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(n + 1, format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 18 {
            return Err(bad(n + 1, format!("expected 18 values, found {}", vals.len())));
        }
        let dim = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(bad(n + 1, format!("bad image size {v}")))
            }
        };
        let (w, h) = (dim(vals[4])?, dim(vals[5])?);
        let m = &vals[6..];
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let center = Vec3::new(m[3], m[7], m[11]);
        let cam = Camera::new(vals[0], vals[1], vals[2], vals[3], w, h, rotation, center)
            .map_err(|e| bad(n + 1, e.to_string()))?;
        out.push(cam);
    }
    if out.is_empty() {
        return Err(bad(0, "no cameras".into()));
    }
    Ok(out)
}
