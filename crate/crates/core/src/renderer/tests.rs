use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

use super::*;
use crate::diffcore::{Tape, Tensor};
use crate::fields::{FieldConfig, Fields};

fn tiny_fields() -> FieldConfig {
    FieldConfig {
        pos_bands: 2,
        dir_bands: 1,
        sdf_hidden: 16,
        sdf_layers: 2,
        fea_dim: 4,
        bias_hidden: 8,
        bias_layers: 1,
        color_hidden: 8,
        color_layers: 1,
        ..FieldConfig::default()
    }
}

/// Camera at (0, 0, 3) looking down -z.
fn down_z_camera(w: usize, h: usize, f: f64) -> Camera {
    let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    Camera::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h, r, Vec3::new(0.0, 0.0, 3.0)).unwrap()
}

#[test]
fn alpha_examples() {
    assert_eq!(neus_alpha(0.3, 0.3, 10.0), 0.0);
    // Oracle: (σ(1) - σ(-1)) / σ(1) = 1 - σ(-1)/σ(1) = 1 - e^-1.
    let expected = 1.0 - (-1.0f64).exp();
    assert!((neus_alpha(0.1, -0.1, 10.0) - expected).abs() < 1e-12);
    assert!((neus_alpha(0.1, -0.1, 10.0) - 0.63212).abs() < 1e-5);
    assert_eq!(neus_alpha(-0.2, 0.1, 10.0), 0.0);
    // Deep inside the surface the denominator guard keeps alpha finite.
    assert!(neus_alpha(-50.0, -51.0, 100.0).is_finite());
}

#[test]
fn accumulate_examples() {
    let a = accumulate_color(&[1.0], &[[0.2, 0.4, 0.6]], &[1.0]).unwrap();
    assert_eq!(a.color, [0.2, 0.4, 0.6]);
    // Hand-unrolled: w0 = 0.5, T1 = 0.5, w1 = 0.5 * 1.0.
    let b = accumulate_color(&[0.5, 1.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[1.0, 2.0]).unwrap();
    assert_eq!(b.color, [0.5, 0.5, 0.0]);
    assert!((b.depth - 1.5).abs() < 1e-15);
    let c = accumulate_color(&[0.0; 4], &[[1.0; 3]; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(c.color, [0.0; 3]);
    assert_eq!(c.weight_sum(), 0.0);
    assert!(accumulate_color(&[0.1], &[], &[1.0]).is_err());
}

#[test]
fn rgb_loss_examples() {
    assert_eq!(loss_rgb(&[[0.1, 0.2, 0.3]], &[[0.1, 0.2, 0.3]]).unwrap(), 0.0);
    let l = loss_rgb(&[[0.6, 0.3, 0.8]], &[[0.5, 0.5, 0.5]]).unwrap();
    assert!((l - 0.6).abs() < 1e-12);
    assert!(loss_rgb(&[[0.0; 3]], &[]).is_err());
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::from_rows(&[[0.6, 0.3, 0.8], [0.0, 0.0, 0.0]]));
    let g = tape.constant(Tensor::from_rows(&[[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]));
    let lv = loss_rgb_var(&mut tape, p, g).unwrap();
    assert!((tape.value(lv).item() - 0.3).abs() < 1e-12);
}

#[test]
fn eikonal_examples() {
    assert_eq!(loss_eikonal(&[[0.0, 0.6, 0.8], [1.0, 0.0, 0.0]]), 0.0);
    assert_eq!(loss_eikonal(&[[2.0, 0.0, 0.0]]), 1.0);
    // f = |x|^2 / 2 has gradient x; norms 0.5 and 1.5.
    let l = loss_eikonal(&[[0.5, 0.0, 0.0], [0.0, 0.0, -1.5]]);
    assert!((l - 0.25).abs() < 1e-15);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&[[0.5, 0.0, 0.0], [0.0, 0.0, -1.5]]));
    let sq = tape.square(x);
    let half = tape.scale(sq, 0.5);
    let f = tape.sum(half);
    let g = tape.grad(f, &[x]).unwrap()[0];
    let e = loss_eikonal_var(&mut tape, g);
    assert!((tape.value(e).item() - 0.25).abs() < 1e-12);
}

#[test]
fn camera_rejects_bad_rotation() {
    let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    assert!(Camera::new(10.0, 10.0, 5.0, 5.0, 10, 10, r, Vec3::zeros()).is_err());
    assert!(Camera::new(-1.0, 10.0, 5.0, 5.0, 10, 10, Matrix3::identity(), Vec3::zeros()).is_err());
}

#[test]
fn center_pixel_looks_down_axis() {
    let cam = down_z_camera(65, 65, 80.0);
    let b = generate_rays(&cam, &[32 * 65 + 32]).unwrap();
    let d = b.rays[0].dir;
    assert!((d - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    assert!((b.rays[0].near - 2.0).abs() < 1e-12 && (b.rays[0].far - 4.0).abs() < 1e-12);
}

#[test]
fn corner_pixel_matches_pinhole_oracle() {
    let cam = Camera::look_at(
        Vec3::new(1.5, 2.0, 2.5),
        Vec3::zeros(),
        Vec3::new(0.0, 0.0, 1.0),
        0.9,
        40,
        30,
    )
    .unwrap();
    let b = generate_rays(&cam, &[0, 39, 29 * 40, 30 * 40 - 1]).unwrap();
    // Oracle: d ∝ R K^-1 [u, v, 1]^T with the intrinsic matrix inverted
    // numerically.
    let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let kinv = k.try_inverse().unwrap();
    for (ray, &p) in b.rays.iter().zip(&b.pixels) {
        let (i, j) = (p % 40, p / 40);
        let dc = kinv * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 1.0);
        let expected = (cam.rotation * dc).normalize();
        assert!((ray.dir - expected).norm() < 1e-12);
        assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn projection_inverts_back_projection() {
    let cam = Camera::look_at(Vec3::new(0.0, -2.5, 1.0), Vec3::zeros(), Vec3::z(), 0.8, 50, 40).unwrap();
    let d = cam.direction(12.25, 30.5);
    let p = cam.center + d * 2.2;
    let (u, v, z) = cam.project(&p).unwrap();
    assert!((u - 12.25).abs() < 1e-9 && (v - 30.5).abs() < 1e-9);
    assert!(z > 0.0);
    assert!(cam.project(&(cam.center - cam.forward())).is_none());
}

#[test]
fn rays_missing_the_bounding_sphere_are_flagged() {
    let cam = down_z_camera(64, 64, 20.0);
    let all: Vec<usize> = (0..64 * 64).collect();
    let b = generate_rays(&cam, &all).unwrap();
    assert!(!b.missed.is_empty() && !b.rays.is_empty());
    assert_eq!(b.rays.len() + b.missed.len(), all.len());
    for r in &b.rays {
        assert!((r.dir.norm() - 1.0).abs() < 1e-6);
        assert!(r.near < r.far);
    }
    assert!(generate_rays(&cam, &[64 * 64]).is_err());
}

fn test_ray() -> Ray {
    Ray {
        origin: Vec3::new(0.0, 0.0, 3.0),
        dir: Vec3::new(0.0, 0.0, -1.0),
        near: 2.0,
        far: 4.0,
    }
}

#[test]
fn stratified_has_one_sample_per_stratum() {
    let ray = test_ray();
    let t = sample_along_ray(&ray, 16, 0, 64.0, 5, |_| unreachable!());
    assert_eq!(t.len(), 16);
    for (k, &v) in t.iter().enumerate() {
        let lo = 2.0 + 2.0 * k as f64 / 16.0;
        assert!(v >= lo && v < lo + 2.0 / 16.0);
    }
    assert_eq!(t, sample_along_ray(&ray, 16, 0, 64.0, 5, |_| unreachable!()));
}

#[test]
fn importance_samples_concentrate_at_surface() {
    let ray = test_ray();
    let t_star = 2.77;
    let n_coarse = 32;
    let sdf = |t: &[f64]| t.iter().map(|v| t_star - v).collect::<Vec<_>>();
    let t = sample_along_ray(&ray, n_coarse, 64, 64.0, 11, sdf);
    assert_eq!(t.len(), 96);
    assert!(t.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(t, sample_along_ray(&ray, n_coarse, 64, 64.0, 11, sdf));
    // Oracle: count the extra samples near t* against the coarse-only set.
    let coarse = sample_along_ray(&ray, n_coarse, 0, 64.0, 11, sdf);
    let band = 3.0 * (ray.far - ray.near) / n_coarse as f64;
    let near = |v: &&f64| (**v - t_star).abs() < band;
    let extra_near = t.iter().filter(near).count() - coarse.iter().filter(near).count();
    assert!(extra_near as f64 >= 0.6 * 64.0, "{extra_near} of 64 near the surface");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn depth_is_unbiased_for_planar_crossings(
        t_star in 2.5f64..3.5,
        slope in 0.3f64..1.0,
        sharp in prop::sample::select(vec![50.0, 200.0]),
    ) {
        let (near, far, n) = (2.0, 4.0, 64);
        let dt = (far - near) / n as f64;
        let t: Vec<f64> = (0..n).map(|i| near + i as f64 * dt).collect();
        let f: Vec<f64> = t.iter().map(|v| slope * (t_star - v)).collect();
        let alphas: Vec<f64> = f.windows(2).map(|w| neus_alpha(w[0], w[1], sharp)).collect();
        let mids: Vec<f64> = t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let acc = accumulate_color(&alphas, &vec![[0.0; 3]; n - 1], &mids).unwrap();
        prop_assert!((acc.depth - t_star).abs() <= 0.5 * dt, "depth {} vs {}", acc.depth, t_star);
    }

    #[test]
    fn transmittance_and_weights_are_well_formed(
        f in proptest::collection::vec(-1.0f64..1.0, 2..40),
        sharp in 1.0f64..500.0,
    ) {
        let alphas: Vec<f64> = f.windows(2).map(|w| neus_alpha(w[0], w[1], sharp)).collect();
        let t: Vec<f64> = (0..alphas.len()).map(|i| i as f64).collect();
        let acc = accumulate_color(&alphas, &vec![[1.0; 3]; alphas.len()], &t).unwrap();
        prop_assert!(alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(acc.transmittance.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(acc.transmittance.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(acc.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(acc.weight_sum() <= 1.0 + 1e-12);
    }
}

fn batch_rays() -> Vec<Ray> {
    let cam = down_z_camera(9, 9, 6.0);
    generate_rays(&cam, &[30, 31, 39, 40, 41, 49]).unwrap().rays
}

#[test]
fn rendered_batch_matches_tape_oracle_and_splits() {
    let (fields, store) = Fields::new::<f64>(&tiny_fields(), 2);
    let cfg = RenderConfig {
        n_coarse: 8,
        n_importance: 4,
        ..RenderConfig::default()
    };
    let rays = batch_rays();
    assert_eq!(rays.len(), 6);
    let seeds: Vec<u64> = (0..rays.len() as u64).map(|i| 100 + i).collect();
    let render = |rs: &[Ray], ss: &[u64]| {
        let mut tape = Tape::new();
        let o = render_rays(&mut tape, &fields, &store, rs, ss, &cfg).unwrap();
        (tape.value(o.color).clone(), o.depth, o.weight_sum)
    };
    let (all, depth, wsum) = render(&rays, &seeds);
    let (a, _, _) = render(&rays[..2], &seeds[..2]);
    let (b, _, _) = render(&rays[2..], &seeds[2..]);
    for r in 0..rays.len() {
        let part = if r < 2 { a.row(r) } else { b.row(r - 2) };
        for c in 0..3 {
            assert!((all.at(r, c) - part[c]).abs() < 1e-12);
        }
    }

    // Scalar oracle: recompute ray 3 from per-sample SDF and color values.
    let ts = sample_rays(&fields, &store, &rays[3..4], &seeds[3..4], &cfg).unwrap();
    let t = &ts[0];
    let pts: Vec<[f64; 3]> = t.iter().map(|&v| rays[3].at(v).into()).collect();
    let f = fields.sdf.sdf_values(&store, &pts).unwrap();
    let s = fields.s_value(&store);
    let alphas: Vec<f64> = f.windows(2).map(|w| neus_alpha(w[0], w[1], s)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&pts));
    let out = fields.sdf.forward(&mut tape, &store, x).unwrap();
    let fs = tape.sum(out.f);
    let g = tape.grad(fs, &[x]).unwrap()[0];
    let dir: [f64; 3] = rays[3].dir.into();
    let dv = tape.constant(Tensor::from_rows(&vec![dir; pts.len()]));
    let rgb = fields.color.forward(&mut tape, &store, x, dv, g, out.fea).unwrap();
    let cols: Vec<[f64; 3]> = (0..pts.len() - 1)
        .map(|i| {
            let r = tape.value(rgb).row(i);
            [r[0], r[1], r[2]]
        })
        .collect();
    let mids: Vec<f64> = t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let acc = accumulate_color(&alphas, &cols, &mids).unwrap();
    let bg = cfg.background;
    for c in 0..3 {
        let expected = acc.color[c] + (1.0 - acc.weight_sum()) * bg[c];
        assert!((all.at(3, c) - expected).abs() < 1e-12);
    }
    assert!((depth[3] - acc.depth).abs() < 1e-12);
    assert!((wsum[3] - acc.weight_sum()).abs() < 1e-12);
}

#[test]
fn depth_and_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = DepthMap::filled(3, 2, 1.5);
    d.data[4] = f32::INFINITY;
    let p = dir.path().join("depth/view_000.f32");
    d.write(&p).unwrap();
    assert_eq!(DepthMap::read(&p).unwrap(), d);
    std::fs::write(&p, [1u8, 2, 3]).unwrap();
    assert!(DepthMap::read(&p).is_err());

    let mut img = ColorImage::filled(4, 3, [0.2, 0.5, 0.9]);
    img.set(5, [1.0, 0.0, 0.33]);
    let q = dir.path().join("images/view_000.png");
    img.write_png(&q).unwrap();
    assert_eq!(ColorImage::read_png(&q).unwrap(), img.quantized());
}
