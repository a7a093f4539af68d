use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Ray};
use super::sampling::{importance, stratified};
use crate::diffcore::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{points_tensor, Fields};
use crate::rng::stream;
use crate::scalar::Real;

/// Lower bound on `Φ_s(f_i)` in the opacity denominator.
pub const PHI_FLOOR: f64 = 1e-12;

/// Discrete opacity of the interval between two consecutive samples.
pub fn neus_alpha(f_i: f64, f_ip1: f64, s: f64) -> f64 {
    let p0 = sigmoid(s * f_i);
    let p1 = sigmoid(s * f_ip1);
    ((p0 - p1) / p0.max(PHI_FLOOR)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accumulated {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Weighted mean of `t`; `0` when every weight vanishes.
    pub depth: f64,
}

impl Accumulated {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Front-to-back compositing of per-interval opacities and colors. `t` holds
/// the representative distance of each interval.
pub fn accumulate_color(alphas: &[f64], colors: &[[f64; 3]], t: &[f64]) -> Result<Accumulated> {
    if alphas.len() != colors.len() || alphas.len() != t.len() {
        return Err(Error::Shape(format!(
            "accumulate_color: {} alphas, {} colors, {} distances",
            alphas.len(),
            colors.len(),
            t.len()
        )));
    }
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(alphas.len());
    let mut transmittance = Vec::with_capacity(alphas.len());
    let mut depth = 0.0;
    for ((&a, c), &ti) in alphas.iter().zip(colors).zip(t) {
        let w = trans * a;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth += w * ti;
        weights.push(w);
        transmittance.push(trans);
        trans *= 1.0 - a;
    }
    let wsum: f64 = weights.iter().sum();
    Ok(Accumulated {
        color,
        weights,
        transmittance,
        depth: depth / wsum.max(1e-8),
    })
}

/// Mean over rays of the per-ray channel sum of absolute errors.
pub fn loss_rgb(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("loss_rgb: {} vs {} rays", pred.len(), gt.len())));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (0..3).map(|k| (p[k] - g[k]).abs()).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean of `(|g| - 1)^2` over gradient samples.
pub fn loss_eikonal(grads: &[[f64; 3]]) -> f64 {
    if grads.is_empty() {
        return 0.0;
    }
    let s: f64 = grads
        .iter()
        .map(|g| ((g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt() - 1.0).powi(2))
        .sum();
    s / grads.len() as f64
}

/// Tape version of [`loss_rgb`] for `n x 3` predictions and targets.
pub fn loss_rgb_var<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) || tape.shape(pred)[1] != 3 {
        return Err(Error::Shape(format!(
            "loss_rgb: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(gt)
        )));
    }
    let n = tape.shape(pred)[0];
    let d = tape.sub(pred, gt);
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Tape version of [`loss_eikonal`] for `n x 3` gradients.
pub fn loss_eikonal_var<T: Real>(tape: &mut Tape<T>, grads: Var) -> Var {
    let sq = tape.square(grads);
    let n2 = tape.sum_cols(sq);
    // Keeps sqrt differentiable at a vanishing gradient.
    let n2 = tape.offset(n2, 1e-12);
    let norm = tape.sqrt(n2);
    let dev = tape.offset(norm, -1.0);
    let dev2 = tape.square(dev);
    tape.mean(dev2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
    /// Lower bound on the sharpness used to place importance samples.
    pub importance_s_min: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_importance: 64,
            importance_s_min: 64.0,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl RenderConfig {
    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_importance
    }
}

/// Differentiable rendering of a ray batch.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `R x 3` composited color including the background term.
    pub color: Var,
    /// `1 x 1` Eikonal loss over every sample of every ray.
    pub eikonal: Var,
    pub weight_sum: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Per-ray sample distances: stratified, then refined by the current field.
pub fn sample_rays<T: Real>(
    fields: &Fields,
    store: &ParamStore<T>,
    rays: &[Ray],
    seeds: &[u64],
    cfg: &RenderConfig,
) -> Result<Vec<Vec<f64>>> {
    if rays.len() != seeds.len() {
        return Err(Error::Shape(format!("{} rays but {} seeds", rays.len(), seeds.len())));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| stream(s, 0)).collect();
    let coarse: Vec<Vec<f64>> = rays
        .iter()
        .zip(rngs.iter_mut())
        .map(|(r, rng)| stratified(r.near, r.far, cfg.n_coarse, rng))
        .collect();
    if cfg.n_importance == 0 {
        return Ok(coarse);
    }
    let pts: Vec<[f64; 3]> = rays
        .iter()
        .zip(&coarse)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| r.at(t).into()))
        .collect();
    let f = fields.sdf.sdf_values(store, &pts)?;
    let s = fields.s_value(store).max(cfg.importance_s_min);
    Ok(coarse
        .iter()
        .zip(f.chunks(cfg.n_coarse))
        .zip(rngs.iter_mut())
        .map(|((t, fc), rng)| importance(t, fc, s, cfg.n_importance, rng))
        .collect())
}

/// Renders `rays` on the tape. Each ray's sample placement depends only on its
/// own seed, so splitting a batch does not change any ray's result.
pub fn render_rays<T: Real>(
    tape: &mut Tape<T>,
    fields: &Fields,
    store: &ParamStore<T>,
    rays: &[Ray],
    seeds: &[u64],
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    if rays.is_empty() {
        return Err(Error::InvalidInput("render_rays: empty ray batch".into()));
    }
    let ts = sample_rays(fields, store, rays, seeds, cfg)?;
    let r = rays.len();
    let n = cfg.samples_per_ray();
    let mut pts = Vec::with_capacity(r * n);
    let mut dirs = Vec::with_capacity(r * n);
    for (ray, t) in rays.iter().zip(&ts) {
        for &ti in t {
            pts.push(ray.at(ti).into());
            dirs.push(ray.dir.into());
        }
    }
    let x = tape.leaf(points_tensor::<T>(&pts));
    let d = tape.constant(points_tensor::<T>(&dirs));
    let out = fields.sdf.forward(tape, store, x)?;
    let fsum = tape.sum(out.f);
    let g = tape.grad(fsum, &[x])?[0];
    let rgb = fields.color.forward(tape, store, x, d, g, out.fea)?;
    let eikonal = loss_eikonal_var(tape, g);

    let f = tape.reshape(out.f, r, n);
    let s = fields.s(tape, store);
    let sf = tape.mul_scalar(f, s);
    let phi = tape.sigmoid(sf);
    let p0 = tape.slice(phi, 0, n - 1);
    let p1 = tape.slice(phi, 1, n - 1);
    let num = tape.sub(p0, p1);
    let den = tape.clamp_min(p0, PHI_FLOOR);
    let ratio = tape.div(num, den);
    let alpha = tape.relu(ratio);
    let one_minus = {
        let na = tape.neg(alpha);
        tape.offset(na, 1.0)
    };
    let trans = tape.exclusive_cumprod(one_minus);
    let w = tape.mul(trans, alpha);

    // Interval i takes the color of its left sample; the last sample has no
    // interval and gets weight 0.
    let w_pad = tape.pad_cols(w, 0, n);
    let w_col = tape.reshape(w_pad, r * n, 1);
    let w3 = tape.broadcast_col(w_col, 3);
    let weighted = tape.mul(w3, rgb);
    let per_ray = tape.reshape(weighted, r, n * 3);
    let mut sel = Tensor::zeros(n * 3, 3);
    for i in 0..n {
        for c in 0..3 {
            sel.set(i * 3 + c, c, T::one());
        }
    }
    let sel = tape.constant(sel);
    let fg = tape.matmul(per_ray, sel);
    let wsum = tape.sum_cols(w);
    let rest = {
        let nw = tape.neg(wsum);
        let o = tape.offset(nw, 1.0);
        tape.broadcast_col(o, 3)
    };
    let bg = tape.constant(Tensor::from_f64(r, 3, &cfg.background.repeat(r)));
    let bg_term = tape.mul(rest, bg);
    let color = tape.add(fg, bg_term);

    let wv = tape.value(w);
    let mut weight_sum = Vec::with_capacity(r);
    let mut depth = Vec::with_capacity(r);
    for (ri, t) in ts.iter().enumerate() {
        let row = wv.row(ri);
        let mut ws = 0.0;
        let mut acc = 0.0;
        for i in 0..n - 1 {
            let wi = row[i].f64();
            ws += wi;
            acc += wi * 0.5 * (t[i] + t[i + 1]);
        }
        weight_sum.push(ws);
        depth.push(acc / ws.max(1e-8));
    }
    Ok(RenderOutput {
        color,
        eikonal,
        weight_sum,
        depth,
    })
}

/// Full-image render outside of training.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub color: super::io::ColorImage,
    /// Expected depth along the ray; `+inf` where the accumulated weight is
    /// below one half or the ray misses the bounding sphere.
    pub depth: super::io::DepthMap,
}

pub fn render_view<T: Real>(
    fields: &Fields,
    store: &ParamStore<T>,
    cam: &Camera,
    cfg: &RenderConfig,
    seed: u64,
    chunk: usize,
) -> Result<RenderedView> {
    let npx = cam.num_pixels();
    let mut color = super::io::ColorImage::filled(cam.width, cam.height, cfg.background);
    let mut depth = super::io::DepthMap::filled(cam.width, cam.height, f32::INFINITY);
    let all: Vec<usize> = (0..npx).collect();
    for block in all.chunks(chunk.max(1)) {
        let batch = super::camera::generate_rays(cam, block)?;
        if batch.rays.is_empty() {
            continue;
        }
        let seeds: Vec<u64> = batch.pixels.iter().map(|&p| crate::rng::mix_seed(seed, p as u64)).collect();
        let mut tape = Tape::<T>::new();
        let out = render_rays(&mut tape, fields, store, &batch.rays, &seeds, cfg)?;
        let c = tape.value(out.color);
        for (k, &p) in batch.pixels.iter().enumerate() {
            let row = c.row(k);
            color.set(p, [row[0].f64(), row[1].f64(), row[2].f64()]);
            if out.weight_sum[k] >= 0.5 {
                depth.data[p] = out.depth[k] as f32;
            }
        }
    }
    Ok(RenderedView { color, depth })
}
