use crate::diffcore::Grid2;
use crate::error::{Error, Result};
use crate::renderer::{Camera, Vec3};

/// Gradients shorter than this cannot define a projection direction.
pub const MIN_GRAD_NORM: f64 = 1e-6;

/// A guide point moved onto the zero level set along the SDF gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceProjection {
    pub x: Vec3,
    pub f: f64,
    pub g: Vec3,
    pub t: Vec3,
}

/// `x - f g / |g|`, or `None` when `|g| < MIN_GRAD_NORM`.
pub fn project_to_surface(x: Vec3, f: f64, g: Vec3) -> Option<SurfaceProjection> {
    let n = g.norm();
    if !(n >= MIN_GRAD_NORM) {
        return None;
    }
    Some(SurfaceProjection {
        x,
        f,
        g,
        t: x - g * (f / n),
    })
}

/// Index of the smallest-magnitude component.
pub(super) fn least_axis(g: &Vec3) -> usize {
    (0..3).min_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0)
}

/// Orthonormal `(u, v)` spanning the plane orthogonal to `g`.
pub fn tangent_frame(g: &Vec3) -> (Vec3, Vec3) {
    let n = g.normalize();
    let k = least_axis(&n);
    let mut e = Vec3::zeros();
    e[k] = 1.0;
    let u = n.cross(&e).normalize();
    let v = n.cross(&u);
    (u, v)
}

/// Square `k x k` grid of points in the tangent plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Vec3,
    pub k: usize,
    /// Row-major: index `a * k + b` is `center + s_a u + s_b v`.
    pub points: Vec<Vec3>,
}

/// Offsets of a `k x k` grid spanning `extent x extent` in the plane
/// orthogonal to `g`, centered at the origin.
pub fn patch_offsets(g: &Vec3, k: usize, extent: f64) -> Result<Vec<Vec3>> {
    if k % 2 == 0 {
        return Err(Error::InvalidInput(format!("patch size {k} must be odd")));
    }
    if !(g.norm() >= MIN_GRAD_NORM) {
        return Err(Error::InvalidInput("patch normal is degenerate".into()));
    }
    let (u, v) = tangent_frame(g);
    let half = (k / 2) as f64;
    let step = if k > 1 { extent / (k - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(k * k);
    for a in 0..k {
        for b in 0..k {
            out.push(u * ((a as f64 - half) * step) + v * ((b as f64 - half) * step));
        }
    }
    Ok(out)
}

pub fn build_patch(t: Vec3, g: Vec3, k: usize, extent: f64) -> Result<Patch> {
    let points = patch_offsets(&g, k, extent)?.into_iter().map(|o| t + o).collect();
    Ok(Patch { center: t, k, points })
}

/// Continuous pixel coordinates of `p` if it lies in front of `cam` and
/// within the hull of pixel centers, so bilinear lookups never clamp.
pub fn project_in_bounds(cam: &Camera, p: &Vec3) -> Option<(f64, f64)> {
    let (u, v, _) = cam.project(p)?;
    let inside = u >= 0.5 && u <= cam.width as f64 - 0.5 && v >= 0.5 && v <= cam.height as f64 - 0.5;
    inside.then_some((u, v))
}

/// Bilinear grayscale samples at the projection of every patch point, or
/// `None` if any point is behind the camera or out of bounds.
pub fn sample_intensities(points: &[Vec3], cam: &Camera, luma: &Grid2<f64>) -> Option<Vec<f64>> {
    points
        .iter()
        .map(|p| project_in_bounds(cam, p).map(|(u, v)| luma.sample(u, v).0))
        .collect()
}

/// Normalized cross-correlation with each variance floored by `eta`:
/// `cov / sqrt((var_a + eta) (var_b + eta))`.
pub fn ncc_score(a: &[f64], b: &[f64], eta: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "patch sizes differ");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (cov / n) / ((va / n + eta) * (vb / n + eta)).sqrt()
}

/// Photometric loss from per-point lists of source-view scores: each point
/// keeps its `m` best scores and contributes the mean of `1 - score` over
/// them; the result averages over points with at least one score. Returns
/// the loss and the number of points without any score.
pub fn loss_pc_from_scores(scores: &[Vec<f64>], m: usize) -> (f64, usize) {
    let mut total = 0.0;
    let mut used = 0usize;
    for s in scores {
        if s.is_empty() {
            continue;
        }
        let mut s = s.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        let keep = &s[..m.min(s.len())];
        total += keep.iter().map(|v| 1.0 - v).sum::<f64>() / keep.len() as f64;
        used += 1;
    }
    let skipped = scores.len() - used;
    (if used == 0 { 0.0 } else { total / used as f64 }, skipped)
}
