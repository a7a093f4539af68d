use proptest::prelude::*;

use super::*;
use crate::diffcore::{Tape, Tensor};
use crate::fields::GaussianSdfPrediction;

fn pred(f: f64, s: f64) -> GaussianSdfPrediction {
    GaussianSdfPrediction {
        f,
        sigma2_raw: 0.0,
        sigma2_act: s,
        fea: Vec::new(),
    }
}

#[test]
fn usdf_examples() {
    assert_eq!(loss_usdf(&[pred(0.0, 1.0)]).unwrap(), 0.0);
    let expected = 0.04 / 0.08 + 0.04f64.ln() / 2.0;
    let got = loss_usdf(&[pred(0.2, 0.04)]).unwrap();
    assert!((got - expected).abs() < 1e-14);
    assert!((got + 1.10944).abs() < 1e-5);
    let two = loss_usdf(&[pred(0.2, 0.04), pred(0.2, 0.04)]).unwrap();
    assert!((two - got).abs() < 1e-15);
    assert!(loss_usdf(&[]).is_err());
}

#[test]
fn usdf_tape_matches_scalar() {
    let f = [0.3, -0.1, 0.02];
    let s = [0.5, 0.01, 1e-3];
    let mut tape = Tape::<f64>::new();
    let fv = tape.leaf(Tensor::from_f64(3, 1, &f));
    let sv = tape.leaf(Tensor::from_f64(3, 1, &s));
    let l = loss_usdf_var(&mut tape, fv, sv).unwrap();
    assert!((tape.value(l).item() - loss_usdf_values(&f, &s).unwrap()).abs() < 1e-14);
    let g = tape.backward(l).unwrap();
    let gf = g.get(fv).unwrap();
    for i in 0..3 {
        assert!((gf.at(i, 0) - f[i] / s[i] / 3.0).abs() < 1e-12);
    }
}

#[test]
fn frozen_unit_variance_is_half_mse() {
    let f = [0.3, -0.2, 0.05, 0.7];
    let ones = [1.0; 4];
    let mse = f.iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!((loss_usdf_values(&f, &ones).unwrap() - 0.5 * mse).abs() < 1e-15);
}

proptest! {
    #[test]
    fn usdf_gradient_is_residual_over_variance(f in -1.0f64..1.0, s in 1e-3f64..2.0) {
        let h = 1e-6;
        let fd = (loss_usdf_values(&[f + h], &[s]).unwrap() - loss_usdf_values(&[f - h], &[s]).unwrap()) / (2.0 * h);
        prop_assert!((fd - f / s).abs() <= 1e-6 * (1.0 + (f / s).abs()));
    }

    #[test]
    fn gradient_weight_falls_with_variance(f in 0.01f64..1.0, s in 1e-3f64..1.0, k in 1.01f64..10.0) {
        let g = |s: f64| {
            let h = 1e-7;
            (loss_usdf_values(&[f + h], &[s]).unwrap() - loss_usdf_values(&[f - h], &[s]).unwrap()) / (2.0 * h)
        };
        prop_assert!(g(s * k) < g(s));
    }

    #[test]
    fn variance_optimum_is_squared_residual(r in 0.011f64..1.0) {
        let s_opt = r * r;
        let l = |s: f64| loss_usdf_values(&[r], &[s]).unwrap();
        let h = 1e-6 * s_opt;
        let slope = (l(s_opt + h) - l(s_opt - h)) / (2.0 * h);
        prop_assert!(slope.abs() < 1e-6 / s_opt);
        prop_assert!(l(s_opt) < l(s_opt * 1.1));
        prop_assert!(l(s_opt) < l(s_opt * 0.9));
    }

    #[test]
    fn filter_keeps_order_and_strictness(v in proptest::collection::vec(1e-5f64..1e-3, 0..50)) {
        let cfg = FilterConfig { epsilon: 4e-4, warmup_steps: 10 };
        let kept = filter_high_fidelity(&v, &cfg, 10);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        for (i, &s) in v.iter().enumerate() {
            prop_assert_eq!(kept.contains(&i), s < cfg.epsilon);
        }
        prop_assert!(filter_high_fidelity(&v, &cfg, 9).is_empty());
    }
}

#[test]
fn naive_examples() {
    assert_eq!(loss_naive_sdf(&[0.0, 0.0]).unwrap(), 0.0);
    assert!((loss_naive_sdf(&[0.1, -0.3]).unwrap() - 0.2).abs() < 1e-15);
    let a = loss_naive_sdf(&[0.1, -0.3, 0.25]).unwrap();
    let b = loss_naive_sdf(&[0.2, -0.6, 0.5]).unwrap();
    assert!((b - 2.0 * a).abs() < 1e-15);
    let mut tape = Tape::<f64>::new();
    let f = tape.leaf(Tensor::from_f64(2, 1, &[0.1, -0.3]));
    let l = loss_naive_sdf_var(&mut tape, f);
    assert!((tape.value(l).item() - 0.2).abs() < 1e-15);
}

#[test]
fn filter_examples() {
    let eps = 4e-4;
    let cfg = FilterConfig { epsilon: eps, warmup_steps: 0 };
    assert!(filter_high_fidelity(&[eps; 3], &cfg, 0).is_empty());
    assert_eq!(filter_high_fidelity(&[0.5 * eps, 2.0 * eps, 0.9 * eps], &cfg, 5), vec![0, 2]);
    assert!(FilterConfig { epsilon: 5e-5, warmup_steps: 0 }.validate(1e-4).is_err());
    assert!(FilterConfig { epsilon: 1e-4, warmup_steps: 0 }.validate(1e-4).is_err());
    assert!(FilterConfig::default().validate(1e-4).is_ok());
}

#[test]
fn bias_examples() {
    assert_eq!(loss_bias(&[0.0, 0.0]), 0.0);
    assert!((loss_bias(&[0.1, -0.3]) - 0.2).abs() < 1e-15);
    assert_eq!(loss_bias(&[]), 0.0);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(1, 1, &[0.4]));
    let l = loss_bias_var(&mut tape, None);
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn ply_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let b = PointBatch::new(
        vec![[0.1, -0.2, 1.0 / 3.0], [1e-17, 2.5, -0.75]],
        vec![3, 0],
        Some(vec![true, false]),
    )
    .unwrap();
    let p = dir.path().join("points.ply");
    b.write_ply(&p).unwrap();
    assert_eq!(PointBatch::read_ply(&p).unwrap(), b);

    let bare = PointBatch {
        gt_noise_label: None,
        ..b.clone()
    };
    bare.write_ply(&p).unwrap();
    assert_eq!(PointBatch::read_ply(&p).unwrap(), bare);

    std::fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n").unwrap();
    let xyz = PointBatch::read_ply(&p).unwrap();
    assert_eq!(xyz.positions, vec![[1.0, 2.0, 3.0]]);
    assert_eq!(xyz.source_view, vec![0]);

    std::fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n").unwrap();
    assert!(matches!(PointBatch::read_ply(&p), Err(crate::Error::Format { .. })));
}

#[test]
fn batch_validation_and_subsets() {
    assert!(PointBatch::new(vec![[0.0; 3]], vec![], None).is_err());
    assert!(PointBatch::new(vec![[f64::NAN, 0.0, 0.0]], vec![0], None).is_err());
    let b = PointBatch::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]], vec![1, 0, 1], Some(vec![false, true, false])).unwrap();
    assert_eq!(b.view_subsets(2), vec![vec![1], vec![0, 2]]);
    assert!(b.check_views(2).is_ok());
    assert!(b.check_views(1).is_err());
    let s = b.select(&[2, 1]);
    assert_eq!(s.positions, vec![[2.0; 3], [1.0; 3]]);
    assert_eq!(s.gt_noise_label, Some(vec![false, true]));
}
