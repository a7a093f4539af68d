use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shapes::AnalyticScene;
use crate::error::{Error, Result};
use crate::pointguide::PointBatch;
use crate::renderer::{sphere_interval, Camera, ColorImage, DepthMap, Vec3};
use crate::rng::stream;

/// Cameras on a sphere around the origin, all looking at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub views: usize,
    pub resolution: usize,
    /// Distance of every camera center from the origin.
    pub distance: f64,
    /// Field of view as a multiple of the angle the unit sphere subtends.
    pub fov_margin: f64,
    /// Largest `|z| / distance` of a camera center; keeps views off the poles.
    pub max_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            views: 16,
            resolution: 128,
            distance: 2.5,
            fov_margin: 1.05,
            max_height: 0.85,
        }
    }
}

pub fn camera_rig(cfg: &RigConfig) -> Result<Vec<Camera>> {
    if cfg.views < 8 {
        return Err(Error::Config(format!("a rig needs at least 8 views, got {}", cfg.views)));
    }
    if !(cfg.distance > 1.0) || !(cfg.fov_margin >= 1.0) || !(cfg.max_height > 0.0 && cfg.max_height < 1.0) {
        return Err(Error::Config(format!("invalid rig {cfg:?}")));
    }
    let fov = 2.0 * (1.0 / cfg.distance).asin() * cfg.fov_margin;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..cfg.views)
        .map(|k| {
            let z = cfg.max_height * (1.0 - 2.0 * (k as f64 + 0.5) / cfg.views as f64);
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            let eye = Vec3::new(r * phi.cos(), r * phi.sin(), z) * cfg.distance;
            Camera::look_at(eye, Vec3::zeros(), Vec3::z(), fov, cfg.resolution, cfg.resolution)
        })
        .collect()
}

pub const MAX_TRACE_STEPS: usize = 256;
const HIT_EPS: f64 = 1e-9;

/// First intersection distance along a unit ray within the unit bounding
/// sphere, by sphere tracing.
pub fn trace(scene: &AnalyticScene, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let (near, far) = sphere_interval(origin, dir, 1.0)?;
    let mut t = near;
    for _ in 0..MAX_TRACE_STEPS {
        let d = scene.sdf((origin + dir * t).into());
        if d.abs() < HIT_EPS {
            return Some(t);
        }
        if d < 0.0 {
            // Overshoot from an inexact blend: step back along the ray.
            t += d;
            continue;
        }
        t += d;
        if t > far {
            return None;
        }
    }
    None
}

/// Fixed directional light; shading does not depend on the viewer.
const LIGHT: [f64; 3] = [0.4, -0.5, 0.768_114_574_786_860_8];
const AMBIENT: f64 = 0.35;

pub fn shade(scene: &AnalyticScene, p: [f64; 3]) -> [f64; 3] {
    let g = scene.shape.gradient(p);
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
    let lambert = ((g[0] * LIGHT[0] + g[1] * LIGHT[1] + g[2] * LIGHT[2]) / n).max(0.0);
    let a = scene.texture.albedo(p);
    a.map(|c| (c * (AMBIENT + (1.0 - AMBIENT) * lambert)).clamp(0.0, 1.0))
}

/// Sphere-traced color and ray-distance depth of every pixel center.
pub fn render_ground_truth(scene: &AnalyticScene, cam: &Camera, background: [f64; 3]) -> (ColorImage, DepthMap) {
    let mut color = ColorImage::filled(cam.width, cam.height, background);
    let mut depth = DepthMap::filled(cam.width, cam.height, f32::INFINITY);
    for p in 0..cam.num_pixels() {
        let (i, j) = (p % cam.width, p / cam.width);
        let dir = cam.direction(i as f64 + 0.5, j as f64 + 0.5);
        if let Some(t) = trace(scene, &cam.center, &dir) {
            color.set(p, shade(scene, (cam.center + dir * t).into()));
            depth.data[p] = t as f32;
        }
    }
    (color, depth)
}

/// Points with `normal . p > offset` are eligible for noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfSpace {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl HalfSpace {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        self.normal.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() > self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub proportion: f64,
    /// Standard deviation per axis in scene units.
    pub sigma: f64,
    pub region: Option<HalfSpace>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            proportion: 0.0,
            sigma: 0.5,
            region: None,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.proportion) || !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("invalid noise model {self:?}")));
        }
        Ok(())
    }
}

/// Surface points from randomly chosen foreground pixels of each view (views
/// assigned round-robin), each traced through a random position inside its
/// pixel. Exactly `floor(proportion * n)` eligible points then receive
/// isotropic Gaussian offsets.
pub fn sample_point_cloud(
    scene: &AnalyticScene,
    cameras: &[Camera],
    depths: &[DepthMap],
    n_points: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<PointBatch> {
    noise.validate()?;
    if n_points == 0 {
        return Err(Error::InvalidInput("point cloud needs at least one point".into()));
    }
    let fg: Vec<Vec<usize>> = depths
        .iter()
        .map(|d| (0..d.data.len()).filter(|&p| d.data[p].is_finite()).collect())
        .collect();
    let usable: Vec<usize> = (0..cameras.len()).filter(|&v| !fg[v].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("no view sees the scene".into()));
    }
    let mut rng = stream(seed, 0x9017);
    let mut traced: Vec<[f64; 3]> = Vec::with_capacity(n_points);
    let mut views = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let v = usable[i % usable.len()];
        let cam = &cameras[v];
        let mut hit = None;
        for _ in 0..32 {
            let p = fg[v][rng.random_range(0..fg[v].len())];
            let (u, w) = ((p % cam.width) as f64, (p / cam.width) as f64);
            let dir = cam.direction(u + rng.random::<f64>(), w + rng.random::<f64>());
            if let Some(t) = trace(scene, &cam.center, &dir) {
                hit = Some(cam.center + dir * t);
                break;
            }
        }
        let p = hit.ok_or_else(|| Error::InvalidInput(format!("view {v}: could not hit the surface")))?;
        traced.push(p.into());
        views.push(v);
    }
    // Views were assigned round-robin; shuffling keeps interval downsampling
    // from aliasing with the view cycle.
    let mut order: Vec<usize> = (0..n_points).collect();
    order.shuffle(&mut rng);
    let mut positions: Vec<[f64; 3]> = order.iter().map(|&i| traced[i]).collect();
    let views: Vec<usize> = order.iter().map(|&i| views[i]).collect();
    let mut labels = vec![false; n_points];
    let eligible: Vec<usize> = match &noise.region {
        Some(h) => (0..n_points).filter(|&i| h.contains(&positions[i])).collect(),
        None => (0..n_points).collect(),
    };
    let quota = ((noise.proportion * n_points as f64).floor() as usize).min(eligible.len());
    let mut nrng = stream(seed, 0x4015e);
    let mut chosen = sample_indices(&mut nrng, eligible.len(), quota).into_vec();
    chosen.sort_unstable();
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
    for c in chosen {
        let i = eligible[c];
        for k in 0..3 {
            positions[i][k] += normal.sample(&mut nrng);
        }
        labels[i] = true;
    }
    PointBatch::new(positions, views, Some(labels))
}

/// Every `k`-th point starting at index 0.
pub fn downsample_interval(points: &PointBatch, k: usize) -> Result<PointBatch> {
    if k == 0 {
        return Err(Error::InvalidInput("downsample interval must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..points.len()).step_by(k).collect();
    Ok(points.select(&idx))
}
