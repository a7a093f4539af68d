//! Mesh extraction and reconstruction metrics.

mod mesh;
mod metrics;
mod tables;

pub use mesh::{marching_cubes, Aabb, TriangleMesh};
pub use metrics::{
    chamfer, chamfer_brute_force, depth_mae, mean_nn_distance, uncertainty_noise_auc, MetricsReport,
};

use crate::error::Result;
use crate::rng::stream;

/// `n` points spread uniformly by area over the zero set of an analytic
/// field: a marching-cubes mesh is sampled by area and each sample is pulled
/// onto the zero set with a few Newton steps along the gradient.
pub fn surface_samples(sdf: impl Fn([f64; 3]) -> f64, n: usize, resolution: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let mesh = marching_cubes(|pts| Ok(pts.iter().map(|&p| sdf(p)).collect()), resolution, &Aabb::unit())?;
    let mut rng = stream(seed, 0x5eed);
    let mut pts = mesh.sample_uniform(n, &mut rng)?;
    let h = 1e-6;
    for p in &mut pts {
        for _ in 0..4 {
            let f = sdf(*p);
            let g: [f64; 3] = std::array::from_fn(|k| {
                let mut a = *p;
                let mut b = *p;
                a[k] += h;
                b[k] -= h;
                (sdf(a) - sdf(b)) / (2.0 * h)
            });
            let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            if g2 < 1e-12 {
                break;
            }
            for k in 0..3 {
                p[k] -= f * g[k] / g2;
            }
        }
    }
    Ok(pts)
}

#[cfg(test)]
mod tests;
