use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::renderer::DepthMap;
use crate::rng::stream;

fn sphere(r: f64) -> impl Fn(&[[f64; 3]]) -> crate::Result<Vec<f64>> {
    move |pts| Ok(pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r).collect())
}

fn torus(p: [f64; 3]) -> f64 {
    let q = (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.5;
    (q * q + p[2] * p[2]).sqrt() - 0.2
}

fn random_points(n: usize, seed: u64, scale: f64) -> Vec<[f64; 3]> {
    let mut rng = stream(seed, 1);
    (0..n)
        .map(|_| std::array::from_fn(|_| scale * (2.0 * rng.random::<f64>() - 1.0)))
        .collect()
}

#[test]
fn sphere_vertices_near_radius() {
    let mesh = marching_cubes(sphere(0.5), 64, &Aabb::unit()).unwrap();
    assert!(mesh.triangles.len() > 1000);
    let tol = 2.0 * (2.0 / 64.0);
    for v in &mesh.vertices {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert!((r - 0.5).abs() <= tol, "vertex radius {r}");
    }
    for t in &mesh.triangles {
        assert!(t.iter().all(|&i| (i as usize) < mesh.vertices.len()));
    }
}

#[test]
fn triangles_face_outward() {
    let mesh = marching_cubes(sphere(0.5), 32, &Aabb::unit()).unwrap();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let nrm = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        let centroid: [f64; 3] = std::array::from_fn(|k| (a[k] + b[k] + c[k]) / 3.0);
        assert!(nrm.iter().zip(&centroid).map(|(x, y)| x * y).sum::<f64>() > 0.0);
    }
}

#[test]
fn constant_field_gives_empty_mesh() {
    let mesh = marching_cubes(|p| Ok(vec![1.0; p.len()]), 16, &Aabb::unit()).unwrap();
    assert!(mesh.is_empty());
    assert!(mesh.vertices.is_empty());
}

#[test]
fn low_resolution_rejected() {
    assert!(marching_cubes(sphere(0.5), 8, &Aabb::unit()).is_err());
}

#[test]
fn sign_flip_keeps_vertices() {
    let f = |p: &[[f64; 3]]| Ok(p.iter().map(|&q| torus(q)).collect());
    let g = |p: &[[f64; 3]]| Ok(p.iter().map(|&q| -torus(q)).collect());
    let a = marching_cubes(f, 24, &Aabb::unit()).unwrap();
    let b = marching_cubes(g, 24, &Aabb::unit()).unwrap();
    assert_eq!(a.vertices.len(), b.vertices.len());
    let key = |v: &[f64; 3]| v.map(|x| (x * 1e9).round() as i64);
    let mut ka: Vec<_> = a.vertices.iter().map(key).collect();
    let mut kb: Vec<_> = b.vertices.iter().map(key).collect();
    ka.sort_unstable();
    kb.sort_unstable();
    assert_eq!(ka, kb);
}

#[test]
fn finer_grid_reduces_residual() {
    let field = |p: &[[f64; 3]]| Ok(p.iter().map(|&q| torus(q)).collect());
    let residual = |res| {
        let m = marching_cubes(field, res, &Aabb::unit()).unwrap();
        m.vertices.iter().map(|&v| torus(v).abs()).sum::<f64>() / m.vertices.len() as f64
    };
    let (r32, r64) = (residual(32), residual(64));
    assert!(r64 < r32, "{r64} !< {r32}");
    let diag = 3f64.sqrt() * 2.0 / 32.0;
    let m = marching_cubes(field, 32, &Aabb::unit()).unwrap();
    assert!(m.vertices.iter().all(|&v| torus(v).abs() < diag));
}

#[test]
fn area_sampling_stays_on_mesh_and_balances_octants() {
    let pts = surface_samples(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5, 40_000, 48, 3).unwrap();
    let mut counts = [0usize; 8];
    for p in &pts {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((r - 0.5).abs() < 1e-9);
        counts[(p[0] > 0.0) as usize | ((p[1] > 0.0) as usize) << 1 | ((p[2] > 0.0) as usize) << 2] += 1;
    }
    let n = pts.len() as f64;
    let bound = 3.0 * (0.125 * 0.875 / n).sqrt();
    for c in counts {
        assert!((c as f64 / n - 0.125).abs() < bound, "{counts:?}");
    }
}

#[test]
fn chamfer_examples() {
    let a = random_points(100, 4, 1.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    assert_eq!(chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 1.0);
    assert!(chamfer(&[], &a).is_err());
}

#[test]
fn chamfer_matches_brute_force() {
    for seed in 0..5 {
        let a = random_points(500, seed, 1.0);
        let mut b = random_points(500, seed + 100, 0.7);
        // Also exercise queries far outside the other set's grid.
        b.iter_mut().take(20).for_each(|p| p[0] += 3.0);
        let fast = chamfer(&a, &b).unwrap();
        let slow = chamfer_brute_force(&a, &b).unwrap();
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
    }
    let surf = surface_samples(torus, 500, 32, 9).unwrap();
    let cloud = random_points(500, 77, 0.8);
    assert!((chamfer(&surf, &cloud).unwrap() - chamfer_brute_force(&surf, &cloud).unwrap()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adding_a_shared_point_never_increases_one_way_term(seed in 0u64..1000, na in 1usize..60, nb in 1usize..60, pick in 0usize..60) {
        let a = random_points(na, seed, 1.0);
        let mut b = random_points(nb, seed + 1, 1.0);
        let before = mean_nn_distance(&a, &b).unwrap();
        b.push(a[pick % na]);
        let after = mean_nn_distance(&a, &b).unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn chamfer_is_symmetric(seed in 0u64..1000, na in 1usize..80, nb in 1usize..80) {
        let a = random_points(na, seed, 1.0);
        let b = random_points(nb, seed + 7, 0.5);
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer_brute_force(&a, &b).unwrap()).abs() < 1e-12);
    }
}

fn pairwise_auc(score: &[f64], label: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..score.len() {
        for j in 0..score.len() {
            if label[i] && !label[j] {
                den += 1.0;
                num += if score[i] > score[j] {
                    1.0
                } else if score[i] == score[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auc_examples() {
    let label = [false, false, true, true];
    assert_eq!(uncertainty_noise_auc(&[0.1, 0.2, 0.3, 0.4], &label).unwrap(), Some(1.0));
    assert_eq!(uncertainty_noise_auc(&[1.0; 4], &label).unwrap(), Some(0.5));
    assert_eq!(uncertainty_noise_auc(&[0.1, 0.2], &[true, true]).unwrap(), None);
    assert!(uncertainty_noise_auc(&[0.1], &[true, false]).is_err());
}

#[test]
fn auc_matches_pairwise_count_with_ties() {
    let mut rng = stream(11, 0);
    let score: Vec<f64> = (0..300).map(|_| (rng.random::<f64>() * 10.0).floor()).collect();
    let label: Vec<bool> = (0..300).map(|_| rng.random::<f64>() < 0.3).collect();
    let auc = uncertainty_noise_auc(&score, &label).unwrap().unwrap();
    assert!((auc - pairwise_auc(&score, &label)).abs() < 1e-12);
}

#[test]
fn auc_of_unrelated_scores_is_half() {
    let mut rng = stream(12, 0);
    let n = 10_000;
    let label: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    let score: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let auc = uncertainty_noise_auc(&score, &label).unwrap().unwrap();
    assert!((auc - 0.5).abs() < 0.05, "{auc}");
}

#[test]
fn depth_error_ignores_background() {
    let mut a = DepthMap::filled(2, 2, 1.0);
    let mut b = DepthMap::filled(2, 2, 1.5);
    a.data[0] = f32::INFINITY;
    b.data[1] = f32::INFINITY;
    assert_eq!(depth_mae(&a, &b).unwrap(), Some(0.5));
    let c = DepthMap::filled(2, 2, f32::INFINITY);
    assert_eq!(depth_mae(&a, &c).unwrap(), None);
}

#[test]
fn metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = MetricsReport {
        chamfer: 0.01,
        depth_mae: Some(0.02),
        auc_noise: None,
        loss_curves: Default::default(),
        mesh_vertices: 3,
        mesh_triangles: 1,
    };
    r.loss_curves.insert("rgb".into(), vec![(0, 1.0), (10, 0.5)]);
    let p = dir.path().join("metrics.json");
    r.write_json(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    for key in ["chamfer", "depth_mae", "auc_noise", "loss_curves"] {
        assert!(text.contains(key));
    }
    assert_eq!(MetricsReport::read_json(&p).unwrap(), r);
}
