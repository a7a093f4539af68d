use nalgebra::{Matrix3, Matrix3x4, Vector4};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::diffcore::{Grid2, Tape, Tensor};
use crate::fields::{FieldConfig, Fields};
use crate::renderer::{Camera, ColorImage, Vec3};
use crate::rng::stream;

fn sphere_sdf(p: Vec3, r: f64) -> (f64, Vec3) {
    (p.norm() - r, p.normalize())
}

#[test]
fn projection_examples() {
    let t = project_to_surface(Vec3::new(2.0, 0.0, 0.0), 1.0, Vec3::x()).unwrap().t;
    assert_eq!(t, Vec3::new(1.0, 0.0, 0.0));
    let t = project_to_surface(Vec3::new(0.5, 0.0, 0.0), -0.5, Vec3::x()).unwrap().t;
    assert_eq!(t, Vec3::new(1.0, 0.0, 0.0));
    let x = Vec3::new(0.3, -0.2, 0.1);
    assert_eq!(project_to_surface(x, 0.0, Vec3::new(0.0, 2.0, 0.0)).unwrap().t, x);
    assert!(project_to_surface(x, 0.1, Vec3::new(1e-7, 0.0, 0.0)).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn sphere_projection_lands_on_surface(
        x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0, r in 0.2f64..1.5,
    ) {
        let p = Vec3::new(x, y, z);
        prop_assume!(p.norm() > 1e-3);
        let (f, g) = sphere_sdf(p, r);
        let t = project_to_surface(p, f, g).unwrap().t;
        prop_assert!((t.norm() - r).abs() < 1e-6);
        let (f2, g2) = sphere_sdf(t, r);
        let t2 = project_to_surface(t, f2, g2).unwrap().t;
        prop_assert!((t2 - t).norm() < 1e-6);
    }

    #[test]
    fn plane_projection_lands_on_surface(
        x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0,
        nx in -1.0f64..1.0, ny in -1.0f64..1.0, nz in -1.0f64..1.0, d in -0.5f64..0.5,
    ) {
        let n = Vec3::new(nx, ny, nz);
        prop_assume!(n.norm() > 1e-2);
        let n = n.normalize();
        let p = Vec3::new(x, y, z);
        let t = project_to_surface(p, n.dot(&p) - d, n).unwrap().t;
        prop_assert!((n.dot(&t) - d).abs() < 1e-6);
        let t2 = project_to_surface(t, n.dot(&t) - d, n).unwrap().t;
        prop_assert!((t2 - t).norm() < 1e-6);
    }

    #[test]
    fn patch_lies_in_tangent_plane(gx in -1.0f64..1.0, gy in -1.0f64..1.0, gz in -1.0f64..1.0, e in 0.001f64..0.5) {
        let g = Vec3::new(gx, gy, gz);
        prop_assume!(g.norm() > 1e-3);
        let t = Vec3::new(0.1, 0.2, -0.3);
        let patch = build_patch(t, g, 5, e).unwrap();
        prop_assert_eq!(patch.points.len(), 25);
        for p in &patch.points {
            prop_assert!((p - t).dot(&g).abs() < 1e-9);
        }
        prop_assert!((patch.points[12] - t).norm() < 1e-15);
    }

    #[test]
    fn kept_scores_bound_the_loss(scores in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 0..8), 1..10)) {
        let (l, _) = loss_pc_from_scores(&scores, 4);
        prop_assert!((0.0..=2.0).contains(&l));
    }
}

#[test]
fn patch_examples() {
    let t = Vec3::new(0.0, 0.0, 1.0);
    let one = build_patch(t, Vec3::z(), 1, 0.3).unwrap();
    assert_eq!(one.points, vec![t]);
    let e = 0.2;
    let p = build_patch(t, Vec3::new(0.3, -0.4, 0.8), 3, e).unwrap();
    for idx in [0, 2, 6, 8] {
        assert!(((p.points[idx] - t).norm() - e * 2f64.sqrt() / 2.0).abs() < 1e-12);
    }
    assert!(build_patch(t, Vec3::z(), 4, e).is_err());
    assert!(build_patch(t, Vec3::zeros(), 3, e).is_err());
}

fn camera(eye: Vec3, res: usize) -> Camera {
    Camera::look_at(eye, Vec3::zeros(), Vec3::z(), 0.9, res, res).unwrap()
}

/// Pinhole projection written from the homogeneous matrix `K [R^T | -R^T c]`.
fn pinhole_oracle(cam: &Camera, p: &Vec3) -> (f64, f64) {
    let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let rt = cam.rotation.transpose();
    let tvec = -(rt * cam.center);
    let mut ext = Matrix3x4::zeros();
    ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&tvec);
    let h = k * ext * Vector4::new(p.x, p.y, p.z, 1.0);
    (h.x / h.z, h.y / h.z)
}

#[test]
fn projected_center_matches_pinhole_oracle() {
    let mut rng = stream(5, 0);
    for _ in 0..200 {
        let eye = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..2.0));
        let cam = camera(eye.normalize() * 2.5, 64);
        let x = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let (f, g) = sphere_sdf(x + Vec3::new(0.0, 0.0, 1e-3), 0.4);
        let t = project_to_surface(x, f, g).unwrap().t;
        let (u, v) = project_in_bounds(&cam, &t).unwrap();
        let (uo, vo) = pinhole_oracle(&cam, &t);
        assert!((u - uo).abs() < 0.5 && (v - vo).abs() < 0.5);
        assert!((u - uo).abs() < 1e-9 && (v - vo).abs() < 1e-9);
    }
}

#[test]
fn intensity_sampling_validity() {
    let cam = camera(Vec3::new(0.0, -2.5, 0.0), 32);
    let flat = Grid2::new(32, 32, vec![0.37; 32 * 32]);
    let patch = build_patch(Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 5, 0.1).unwrap();
    let vals = sample_intensities(&patch.points, &cam, &flat).unwrap();
    assert!(vals.iter().all(|&v| (v - 0.37).abs() < 1e-15));
    let behind = build_patch(Vec3::new(0.0, -3.0, 0.0), Vec3::y(), 3, 0.01).unwrap();
    assert!(sample_intensities(&behind.points, &cam, &flat).is_none());
    let outside = build_patch(Vec3::new(5.0, 0.0, 0.0), Vec3::y(), 3, 0.01).unwrap();
    assert!(sample_intensities(&outside.points, &cam, &flat).is_none());
}

#[test]
fn ncc_examples() {
    let a: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    assert!((ncc_score(&a, &a, 1e-6) - 1.0).abs() < 1e-3);
    let neg: Vec<f64> = a.iter().map(|v| 3.0 - v).collect();
    assert!((ncc_score(&a, &neg, 1e-6) + 1.0).abs() < 1e-3);
    let aff: Vec<f64> = a.iter().map(|v| 2.0 * v + 5.0).collect();
    assert!((ncc_score(&aff, &a, 1e-6) - 1.0).abs() < 1e-3);
    let flat = vec![0.5; 25];
    assert_eq!(ncc_score(&flat, &a, 1e-6), 0.0);
}

#[test]
fn score_accumulation_examples() {
    assert_eq!(loss_pc_from_scores(&[vec![1.0, 1.0, 1.0, 1.0, 0.2]], 4), (0.0, 0));
    let (l, skipped) = loss_pc_from_scores(&[vec![1.0, 0.5, 1.0, 0.5]], 4);
    assert!((l - 0.25).abs() < 1e-15);
    assert_eq!(skipped, 0);
    let (l, skipped) = loss_pc_from_scores(&[vec![0.0, 0.5], vec![]], 4);
    assert!((l - 0.75).abs() < 1e-15);
    assert_eq!(skipped, 1);
}

fn textured(res: usize, phase: f64) -> ColorImage {
    let mut img = ColorImage::filled(res, res, [0.0; 3]);
    for j in 0..res {
        for i in 0..res {
            let s = 0.5 + 0.3 * (0.45 * i as f64 + phase).sin() * (0.3 * j as f64).cos();
            img.set(j * res + i, [s, 0.8 * s, 0.5]);
        }
    }
    img
}

fn rig(res: usize) -> (Vec<Camera>, Vec<ColorImage>) {
    let eyes = [
        Vec3::new(2.5, 0.0, 0.3),
        Vec3::new(0.0, 2.5, 0.4),
        Vec3::new(-2.5, 0.2, 0.5),
        Vec3::new(1.7, 1.7, -0.4),
        Vec3::new(1.7, -1.7, 0.9),
        Vec3::new(0.1, -2.5, 0.2),
    ];
    let cams: Vec<Camera> = eyes.iter().map(|&e| camera(e, res)).collect();
    let imgs = (0..cams.len()).map(|k| textured(res, k as f64)).collect();
    (cams, imgs)
}

fn guide_points(n: usize, seed: u64) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut rng = stream(seed, 0);
    let pts = (0..n)
        .map(|_| {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (d.normalize() * rng.random_range(0.3..0.5)).into()
        })
        .collect();
    let views = (0..n).map(|i| i % 6).collect();
    (pts, views)
}

#[test]
fn tape_loss_matches_scalar_pipeline() {
    let (cams, imgs) = rig(48);
    let views = ViewImages::<f64>::new(&cams, &imgs).unwrap();
    let cfg = PcConfig::default();
    let (pts, refs) = guide_points(40, 1);
    let r = 0.4;
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&pts));
    let f: Vec<f64> = pts.iter().map(|p| Vec3::from(*p).norm() - r).collect();
    let g: Vec<[f64; 3]> = pts.iter().map(|p| Vec3::from(*p).normalize().into()).collect();
    let fv = tape.constant(Tensor::from_f64(40, 1, &f));
    let gv = tape.constant(Tensor::from_rows(&g));
    let out = loss_pc_var(&mut tape, x, fv, gv, &refs, &views, &cfg).unwrap();
    assert!(out.stats.scored > 20, "{:?}", out.stats);

    let mut scores = Vec::new();
    for i in 0..40 {
        let xi = Vec3::from(pts[i]);
        let proj = project_to_surface(xi, f[i], Vec3::from(g[i])).unwrap();
        let rc = &cams[refs[i]];
        let (_, _, z) = rc.project(&proj.t).unwrap();
        let patch = build_patch(proj.t, Vec3::from(g[i]), 5, 4.0 * z / rc.fx).unwrap();
        let Some(a) = sample_intensities(&patch.points, rc, views.luma(refs[i])) else {
            continue;
        };
        let s: Vec<f64> = (0..6)
            .filter(|&v| v != refs[i])
            .filter_map(|v| sample_intensities(&patch.points, &cams[v], views.luma(v)))
            .map(|b| ncc_score(&a, &b, 1e-6))
            .collect();
        scores.push(s);
    }
    let (expected, _) = loss_pc_from_scores(&scores, 4);
    assert!((tape.value(out.loss).item() - expected).abs() < 1e-12);
}

#[test]
fn tape_loss_gradient_matches_differences() {
    let (cams, imgs) = rig(48);
    let views = ViewImages::<f64>::new(&cams, &imgs).unwrap();
    let cfg = PcConfig::default();
    let (pts, refs) = guide_points(12, 2);
    let eval = |pts: &[[f64; 3]]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(pts));
        // f and g derived on the tape from x so the whole chain is exercised.
        let sq = tape.square(x);
        let n2 = tape.sum_cols(sq);
        let norm = tape.sqrt(n2);
        let f = tape.offset(norm, -0.4);
        let nb = tape.broadcast_col(norm, 3);
        let g = tape.div(x, nb);
        let out = loss_pc_var(&mut tape, x, f, g, &refs, &views, &cfg).unwrap();
        let l = tape.value(out.loss).item();
        let grad = tape.backward(out.loss).unwrap().get(x).cloned();
        (l, grad)
    };
    let (_, grad) = eval(&pts);
    let grad = grad.unwrap();
    // Bilinear lookups are piecewise linear; a small step keeps the stencil
    // off pixel-cell boundaries.
    let h = 1e-7;
    for i in 0..4 {
        for c in 0..3 {
            let mut p = pts.clone();
            p[i][c] += h;
            let (lp, _) = eval(&p);
            p[i][c] -= 2.0 * h;
            let (lm, _) = eval(&p);
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.at(i, c);
            assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "point {i} axis {c}: fd {fd} vs {an}");
        }
    }
}

#[test]
fn bias_network_receives_no_photometric_gradient() {
    let (cams, imgs) = rig(32);
    let views = ViewImages::<f64>::new(&cams, &imgs).unwrap();
    let cfg = FieldConfig {
        sdf_hidden: 16,
        fea_dim: 4,
        bias_hidden: 8,
        color_hidden: 8,
        ..FieldConfig::default()
    };
    let (fields, store) = Fields::new::<f64>(&cfg, 3);
    let (pts, refs) = guide_points(30, 3);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&pts));
    let out = fields.sdf.forward(&mut tape, &store, x).unwrap();
    let fb = fields.bias.forward(&mut tape, &store, x).unwrap();
    let _final = tape.add(out.f, fb);
    let s = tape.sum(out.f);
    let g = tape.grad(s, &[x]).unwrap()[0];
    let pc = loss_pc_var(&mut tape, x, out.f, g, &refs, &views, &PcConfig::default()).unwrap();
    assert!(pc.stats.scored > 0);
    let grads = tape.param_grads(pc.loss, &store).unwrap();
    assert_eq!(grads.max_abs(fields.bias.params()), 0.0);
    assert!(grads.max_abs(fields.sdf.params()) > 0.0);
}

