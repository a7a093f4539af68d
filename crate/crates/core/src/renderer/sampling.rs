use rand::Rng;

use super::camera::Ray;
use super::volume::neus_alpha;
use crate::rng::stream;

/// One uniform sample per equal-width stratum of `[near, far]`.
pub fn stratified(near: f64, far: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let step = (far - near) / n as f64;
    (0..n)
        .map(|k| near + step * (k as f64 + rng.random::<f64>()))
        .collect()
}

/// Draws `n` extra samples from the piecewise-constant density given by the
/// opacity weights of the intervals between consecutive `t` (at sharpness
/// `s`), merged with `t` into one strictly ascending list.
pub fn importance(t: &[f64], sdf: &[f64], s: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert_eq!(t.len(), sdf.len());
    if n == 0 || t.len() < 2 {
        return t.to_vec();
    }
    let mut trans = 1.0;
    let mut cdf = Vec::with_capacity(t.len());
    cdf.push(0.0);
    let mut total = 0.0;
    for i in 0..t.len() - 1 {
        let a = neus_alpha(sdf[i], sdf[i + 1], s);
        // The floor keeps the density proper on rays with no surface.
        total += trans * a + 1e-5;
        trans *= 1.0 - a;
        cdf.push(total);
    }
    let mut extra = Vec::with_capacity(n);
    let mut k = 0;
    for m in 0..n {
        let u = (m as f64 + rng.random::<f64>()) / n as f64 * total;
        while k + 2 < cdf.len() && cdf[k + 1] < u {
            k += 1;
        }
        let span = cdf[k + 1] - cdf[k];
        let frac = if span > 0.0 { ((u - cdf[k]) / span).clamp(0.0, 1.0) } else { 0.5 };
        extra.push(t[k] + frac * (t[k + 1] - t[k]));
    }
    merge_ascending(t, &extra)
}

fn merge_ascending(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(f64::total_cmp);
    let span = out[out.len() - 1] - out[0];
    let gap = (span.abs() * 1e-9).max(1e-12);
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + gap;
        }
    }
    out
}

/// Stratified samples refined by `n_importance` opacity-proportional samples.
/// `sdf_along` evaluates the field at distances along the ray. The stream is
/// fully determined by `seed`.
pub fn sample_along_ray(
    ray: &Ray,
    n_coarse: usize,
    n_importance: usize,
    s: f64,
    seed: u64,
    mut sdf_along: impl FnMut(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    assert!(n_coarse >= 2, "need at least two coarse samples");
    let mut rng = stream(seed, 0);
    let t = stratified(ray.near, ray.far, n_coarse, &mut rng);
    if n_importance == 0 {
        return t;
    }
    let f = sdf_along(&t);
    importance(&t, &f, s, n_importance, &mut rng)
}
