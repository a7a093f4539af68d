use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;

use super::*;
use crate::diffcore::Tape;
use crate::error::Error;
use crate::rng::stream;
use crate::scenegen::{Dataset, SceneKind};

fn tiny_config(mode: Mode) -> RunConfig {
    let mut c = RunConfig::ci();
    c.scene.kind = SceneKind::Composite;
    c.scene.rig.resolution = 24;
    c.scene.points = 2000;
    c.scene.noise.proportion = 0.2;
    c.fields.sdf_hidden = 16;
    c.fields.sdf_layers = 2;
    c.fields.fea_dim = 8;
    c.fields.bias_hidden = 8;
    c.fields.color_hidden = 8;
    c.render.n_coarse = 8;
    c.render.n_importance = 4;
    c.train.mode = mode;
    c.train.steps = 12;
    c.train.rays = 24;
    c.train.points = 32;
    c.train.log_every = 3;
    c.train.filter.warmup_steps = 2;
    c.train.filter.epsilon = 1.0;
    c.eval.resolution = 16;
    c.eval.points = 500;
    c
}

fn tiny_data(cfg: &RunConfig) -> Arc<Dataset> {
    Arc::new(Dataset::generate(&cfg.scene).unwrap())
}

fn parts(rgb: f64, eik: f64, sdf: f64, usdf: f64, bias: f64, pc: f64) -> LossParts {
    LossParts { rgb, eik, sdf, usdf, bias, pc }
}

#[test]
fn total_loss_examples() {
    let l = Lambdas::default();
    let base = parts(0.5, 0.2, 0.0, 0.0, 0.0, 0.0);
    assert!((total_loss(&base, &l, Mode::Base).unwrap() - 0.52).abs() < 1e-15);
    assert_eq!(total_loss(&LossParts::default(), &l, Mode::Full).unwrap(), 0.0);
    let p = parts(0.5, 0.2, 0.3, -0.4, 0.1, 0.8);
    let full = 0.5 + 0.02 - 0.4 + 0.1 + 0.25 * 0.8;
    assert!((total_loss(&p, &l, Mode::Full).unwrap() - full).abs() < 1e-15);
    assert!((total_loss(&p, &l, Mode::NaivePg).unwrap() - 0.82).abs() < 1e-15);
    assert!((total_loss(&p, &l, Mode::ModelA).unwrap() - 1.02).abs() < 1e-15);
    assert!((total_loss(&p, &l, Mode::Base).unwrap() - 0.52).abs() < 1e-15);
}

#[test]
fn non_finite_term_is_named() {
    let l = Lambdas::default();
    let p = parts(0.5, 0.2, 0.0, f64::NAN, 0.0, 0.0);
    assert!(matches!(total_loss(&p, &l, Mode::Full), Err(Error::NonFiniteLoss("usdf"))));
    let p = parts(0.5, 0.2, 0.0, 0.0, 0.0, f64::INFINITY);
    assert!(matches!(total_loss(&p, &l, Mode::Base), Err(Error::NonFiniteLoss("pc"))));
}

#[test]
fn modes_parse_and_gate() {
    for m in Mode::ALL {
        assert_eq!(m.name().parse::<Mode>().unwrap(), m);
    }
    assert!(matches!("model_d".parse::<Mode>(), Err(Error::Config(_))));
    assert!(!Mode::Base.terms().uses_points());
    assert!(Mode::Full.terms().bias && !Mode::ModelC.terms().bias);
    assert!(Mode::ModelA.terms().sdf && Mode::ModelA.terms().pc);
}

#[test]
fn config_rejects_unknown_keys_and_bad_epsilon() {
    assert!(matches!(RunConfig::from_toml("[train]\nstepz = 3\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    let floor = RunConfig::default().fields.sigma0_sq;
    let text = format!("[train.filter]\nepsilon = {floor}\n");
    assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    let ok = RunConfig::from_toml("[train]\nmode = \"naive_pg\"\nsteps = 7\n").unwrap();
    assert_eq!((ok.train.mode, ok.train.steps), (Mode::NaivePg, 7));
}

#[test]
fn config_toml_round_trip() {
    let c = RunConfig::ci();
    assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
}

#[test]
fn guard_trips_after_patience() {
    let cfg = DivergenceConfig {
        factor: 10.0,
        patience: 3,
        reference_step: 1,
    };
    let mut g = DivergenceGuard::new(cfg);
    g.observe(0, 1e9).unwrap();
    g.observe(1, -0.5).unwrap();
    g.observe(2, 6.0).unwrap();
    g.observe(3, 6.0).unwrap();
    g.observe(4, 1.0).unwrap();
    g.observe(5, 6.0).unwrap();
    g.observe(6, 6.0).unwrap();
    assert!(matches!(g.observe(7, 6.0), Err(Error::Diverged { step: 7, .. })));
}

#[test]
fn median_examples() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[f64::NAN, 5.0]), Some(5.0));
    assert_eq!(median(&[]), None);
}

#[test]
fn suite_case_counts() {
    let base = RunConfig::ci();
    assert_eq!(suite_cases(SuiteKind::Ablation, &base).len(), 6);
    assert_eq!(suite_cases(SuiteKind::NoiseSweep, &base).len(), 6);
    let density = suite_cases(SuiteKind::DensitySweep, &base);
    assert_eq!(density.len(), 5);
    for (case, n) in density.iter().zip(DENSITY_POINTS) {
        let s = &case.config.scene;
        assert_eq!(s.points.div_ceil(s.downsample), n);
    }
    assert!("noise_sweep".parse::<SuiteKind>().is_ok());
    assert!("sweep".parse::<SuiteKind>().is_err());
}

#[test]
fn logged_total_matches_tape_total() {
    let cfg = tiny_config(Mode::Full);
    let data = tiny_data(&cfg);
    let mut t = Trainer::<f64>::new(cfg.clone(), data).unwrap();
    for _ in 0..4 {
        let mut tape = Tape::<f64>::new();
        let (vars, _) = t.build_losses(&mut tape).unwrap();
        let loss = vars.total(&mut tape, &cfg.train.lambda, cfg.train.mode);
        let on_tape = tape.value(loss).item();
        let r = t.step().unwrap();
        let sum: f64 = r.parts.weighted(&cfg.train.lambda).iter().sum();
        assert!((r.total - sum).abs() < 1e-12);
        assert!((r.total - on_tape).abs() < 1e-12, "{} vs {on_tape}", r.total);
    }
}

#[test]
fn base_mode_leaves_bias_network_untouched() {
    let cfg = tiny_config(Mode::Base);
    let data = tiny_data(&cfg);
    let t = Trainer::<f64>::new(cfg.clone(), data).unwrap();
    let mut tape = Tape::<f64>::new();
    let (vars, info) = t.build_losses(&mut tape).unwrap();
    assert_eq!(info.points, 0);
    let loss = vars.total(&mut tape, &cfg.train.lambda, cfg.train.mode);
    let grads = tape.param_grads(loss, t.store()).unwrap();
    let bias: Vec<_> = t.store().ids().filter(|&i| t.store().name(i).starts_with("bias.")).collect();
    assert!(!bias.is_empty());
    assert_eq!(grads.max_abs(bias), 0.0);
    let sdf: Vec<_> = t.store().ids().filter(|&i| t.store().name(i).starts_with("sdf.")).collect();
    assert!(grads.max_abs(sdf) > 0.0);
}

#[test]
fn full_mode_trains_bias_after_warmup() {
    let cfg = tiny_config(Mode::Full);
    let data = tiny_data(&cfg);
    let mut t = Trainer::<f64>::new(cfg, data).unwrap();
    let r0 = t.step().unwrap();
    assert_eq!(r0.filtered, 0);
    t.step().unwrap();
    let r2 = t.step().unwrap();
    assert!(r2.filtered > 0 && r2.parts.bias > 0.0);
}

#[test]
fn noise_labels_do_not_influence_training() {
    let cfg = tiny_config(Mode::Full);
    let data = tiny_data(&cfg);
    let mut shuffled = (*data).clone();
    let labels = shuffled.points.gt_noise_label.as_mut().unwrap();
    labels.shuffle(&mut stream(7, 7));
    assert_ne!(labels, data.points.gt_noise_label.as_ref().unwrap());
    let run = |d: Arc<Dataset>| {
        let mut t = Trainer::<f64>::new(cfg.clone(), d).unwrap();
        t.run_until(6, |_, _| Ok(())).unwrap();
        t.store().to_entries()
    };
    assert_eq!(run(data), run(Arc::new(shuffled)));
}

#[test]
fn resume_is_bitwise_identical() {
    let cfg = tiny_config(Mode::Full);
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::<f64>::new(cfg.clone(), data.clone()).unwrap();
    straight.run_until(cfg.train.steps, |_, _| Ok(())).unwrap();

    let mut first = Trainer::<f64>::new(cfg.clone(), data.clone()).unwrap();
    first.run_until(5, |_, _| Ok(())).unwrap();
    let ckpt = dir.path().join("half.ckpt");
    first.save_checkpoint(&ckpt).unwrap();
    let mut second = Trainer::<f64>::new(cfg.clone(), data).unwrap();
    second.load_checkpoint(&ckpt).unwrap();
    assert_eq!(second.step_index(), 5);
    second.run_until(cfg.train.steps, |_, _| Ok(())).unwrap();

    let bits = |t: &Trainer<f64>| -> Vec<u64> {
        t.checkpoint_entries().iter().flat_map(|e| e.values.iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&straight), bits(&second));
    assert_eq!(straight.curves(), second.curves());
}

#[test]
fn train_and_evaluate_writes_artifacts() {
    let mut cfg = tiny_config(Mode::NaivePg);
    cfg.train.checkpoint_every = 6;
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        out: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let o = train_and_evaluate::<f32>(&cfg, data, &opts).unwrap();
    assert!(o.metrics.chamfer.is_finite());
    for f in ["log.txt", "mesh.ply", "metrics.json", "checkpoints/final.ckpt", "checkpoints/step_000006.ckpt", "checkpoints/step_000012.ckpt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("log.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("step")).count(), 5);
    assert!(o.metrics.loss_curves.contains_key("sdf") && !o.metrics.loss_curves.contains_key("usdf"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gated_terms_never_contribute(
        v in proptest::collection::vec(-10.0f64..10.0, 6),
        mode_ix in 0usize..6,
    ) {
        let mode = Mode::ALL[mode_ix];
        let l = Lambdas::default();
        let p = parts(v[0], v[1], v[2], v[3], v[4], v[5]);
        let t = mode.terms();
        let mut q = p;
        if !t.sdf { q.sdf = 1e3; }
        if !t.usdf { q.usdf = -1e3; }
        if !t.bias { q.bias = 7.0; }
        if !t.pc { q.pc = 1e2; }
        prop_assert_eq!(total_loss(&p, &l, mode).unwrap(), total_loss(&q, &l, mode).unwrap());
    }

    #[test]
    fn total_is_linear_in_lambda(
        v in proptest::collection::vec(0.0f64..5.0, 6),
        k in 0.0f64..4.0,
    ) {
        let p = parts(v[0], v[1], v[2], v[3], v[4], v[5]);
        let l0 = Lambdas { point: 0.0, bias: 0.0, pc: 0.0 };
        let l1 = Lambdas { point: k, bias: k, pc: k };
        let a = total_loss(&p, &l0, Mode::Full).unwrap();
        let b = total_loss(&p, &l1, Mode::Full).unwrap();
        let expect = a + k * (p.usdf + p.bias + p.pc);
        prop_assert!((b - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}
