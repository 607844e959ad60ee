mod common;

use common::{overfit_losses, rng};
use ett_core::decoder::{HeadOutput, StepLogits};
use ett_core::harness::check::DECODER_KINDS;
use ett_core::harness::runner::translator_config;
use ett_core::harness::{ExperimentConfig, DEFAULT_CONFIG};
use ett_core::metrics::Split;
use ett_core::nn::{Grads, ParamSet};
use ett_core::synth::*;
use ett_core::task_models::TaskModel;
use ett_core::train::*;
use ett_core::translator::Translator;
use ett_core::{Error, Tensor2D};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn loss_closed_forms() {
    let (l, _) = loss(&HeadOutput::Logit(0.0), &Target::Binary(true)).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    let (l, g) = loss(&HeadOutput::FrameScores(vec![0.3; 16]), &Target::Keyframe(5)).unwrap();
    assert!((l - 16f64.ln()).abs() < 1e-12);
    let HeadOutput::FrameScores(g) = g else { panic!() };
    assert!((g[5] - (1.0 / 16.0 - 1.0)).abs() < 1e-15);
    assert!(matches!(
        loss(&HeadOutput::FrameScores(vec![0.0; 4]), &Target::Keyframe(4)),
        Err(Error::LabelOutOfRange(_))
    ));
}

fn ce(logits: &[f64], k: usize) -> f64 {
    let s: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[k].exp() / s).ln()
}

#[test]
fn loss_matches_direct_formulas_on_random_cases() {
    let mut r = rng(0);
    for _ in 0..200 {
        let x: f64 = r.random_range(-6.0..6.0);
        let y: bool = r.random();
        let p = 1.0 / (1.0 + (-x).exp());
        let expect = if y { -p.ln() } else { -(1.0 - p).ln() };
        let (l, g) = loss(&HeadOutput::Logit(x), &Target::Binary(y)).unwrap();
        assert!((l - expect).abs() < 1e-12);
        let HeadOutput::Logit(g) = g else { panic!() };
        assert!((g - (p - y as u8 as f64)).abs() < 1e-15);

        let scores: Vec<f64> = (0..7).map(|_| r.random_range(-3.0..3.0)).collect();
        let k = r.random_range(0..7);
        assert!((loss(&HeadOutput::FrameScores(scores.clone()), &Target::Keyframe(k)).unwrap().0 - ce(&scores, k)).abs() < 1e-12);

        let steps: Vec<StepLogits> = (0..4)
            .map(|_| StepLogits {
                verb: (0..3).map(|_| r.random_range(-3.0..3.0)).collect(),
                noun: (0..5).map(|_| r.random_range(-3.0..3.0)).collect(),
            })
            .collect();
        let truth: Vec<(usize, usize)> = (0..4).map(|_| (r.random_range(0..3), r.random_range(0..5))).collect();
        let expect: f64 = steps
            .iter()
            .zip(&truth)
            .map(|(s, &(v, n))| (ce(&s.verb, v) + ce(&s.noun, n)) / 2.0)
            .sum::<f64>()
            / 4.0;
        let (l, _) = loss(&HeadOutput::Steps(steps), &Target::Sequence(truth)).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }
}

fn scalar_set(v: f64) -> (ParamSet, ett_core::nn::ParamId) {
    let mut ps = ParamSet::new();
    let id = ps.add("w", Tensor2D::row_vector(&[v])).unwrap();
    (ps, id)
}

#[test]
fn adam_matches_scalar_reference_loop() {
    let cfg = TrainConfig::default();
    let (mut ps, id) = scalar_set(0.5);
    let mut state = OptimState::new(&ps, &cfg);
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    let g = 0.37;
    let mut last_step = 0.0;
    for t in 1..=2000 {
        let mut grads = Grads::for_trainable(&ps);
        grads.set(id, Tensor2D::row_vector(&[g]));
        optimizer_step(&mut ps, &grads, &mut state).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        let before = w;
        w -= 1e-3 * mhat / (vhat.sqrt() + 1e-8);
        last_step = before - w;
        assert!((ps.get(id).get(0, 0) - w).abs() < 1e-14, "step {t}");
    }
    assert!((last_step - cfg.lr).abs() < 1e-6);
    assert_eq!(state.step, 2000);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let (mut ps, id) = scalar_set(1.25);
    let mut state = OptimState::new(&ps, &TrainConfig::default());
    let before = ps.checksum();
    for _ in 0..10 {
        let mut grads = Grads::for_trainable(&ps);
        grads.set(id, Tensor2D::row_vector(&[0.0]));
        optimizer_step(&mut ps, &grads, &mut state).unwrap();
    }
    assert_eq!(ps.checksum(), before);
    assert_eq!(state.step, 10);
}

#[test]
fn frozen_parameters_survive_many_steps() {
    let mut ps = ParamSet::new();
    let a = ps.add("a", Tensor2D::row_vector(&[1.0, 2.0])).unwrap();
    let b = ps.add("b", Tensor2D::row_vector(&[3.0])).unwrap();
    ps.set_trainable(b, false);
    let frozen_before = ps.get(b).clone();
    let mut state = OptimState::new(&ps, &TrainConfig::default());
    for _ in 0..50 {
        let mut grads = Grads::for_trainable(&ps);
        grads.set(a, Tensor2D::row_vector(&[0.5, -0.5]));
        optimizer_step(&mut ps, &grads, &mut state).unwrap();
    }
    assert_eq!(ps.get(b).as_slice()[0].to_bits(), frozen_before.as_slice()[0].to_bits());
    assert_ne!(ps.get(a).as_slice(), &[1.0, 2.0]);

    let mut extra = Grads::for_trainable(&ps);
    extra.set(a, Tensor2D::row_vector(&[0.0, 0.0]));
    extra.set(b, Tensor2D::row_vector(&[1.0]));
    assert!(matches!(optimizer_step(&mut ps, &extra, &mut state), Err(Error::GradientMismatch(_))));
    let missing = Grads::empty(ps.len());
    assert!(matches!(optimizer_step(&mut ps, &missing, &mut state), Err(Error::GradientMismatch(_))));
}

#[test]
fn each_decoder_kind_overfits_thirty_two_samples() {
    for kind in DECODER_KINDS {
        let h = overfit_losses(kind, 500, 1e-2, 0).unwrap();
        let best = h.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < 0.05, "{kind:?}: start {} best {best}", h[0]);
    }
}

/// Binary task whose one-window Bayes accuracy equals `target`, found by
/// bisection on the analytic ceiling.
fn binary_at_ceiling(target: f64) -> TaskSpec {
    let mut spec = TaskSpec {
        task_id: "aux".into(),
        kind: TaskKind::Binary,
        primary: true,
        channels: vec![0, 1, 2, 3],
        noise_sigma: 1.0,
        corr_rho: 1.0,
        native_fps: 1.0,
        native_window_s: 4.0,
        signal_amp: 1.0,
    };
    let (mut lo, mut hi) = (0.01, 100.0);
    for _ in 0..200 {
        spec.noise_sigma = 0.5 * (lo + hi);
        if bayes_optimal_accuracy(&spec).unwrap() > target {
            lo = spec.noise_sigma;
        } else {
            hi = spec.noise_sigma;
        }
    }
    spec
}

fn stage1_on(spec: &TaskSpec, seed: u64, n_train: usize, n_val: usize) -> (TaskModel, TrainReport, f64) {
    let g = ClipGeometry {
        duration_s: spec.native_window_s,
        fps: spec.native_fps,
        channels: spec.channels.len(),
    };
    let specs = vec![spec.clone()];
    let train = generate(&specs, g, n_train, seed, Split::Train).unwrap();
    let val = generate(&specs, g, n_val, seed, Split::Val).unwrap();
    let data = TaskData {
        spec,
        shape: TrunkShape {
            hidden_dim: 16,
            feature_dim: 8,
            mix_taps: 4,
        },
        train: &train,
        val: &val,
    };
    let (model, report) = train_task_model(&data, &TrainConfig::default(), seed).unwrap();
    let acc = evaluate_task_model(&model, &val).unwrap().metric;
    (model, report, acc)
}

#[test]
fn stage1_reaches_near_the_bayes_ceiling() {
    let spec = binary_at_ceiling(0.92);
    assert!((bayes_optimal_accuracy(&spec).unwrap() - 0.92).abs() < 1e-9);
    let (model, report, acc) = stage1_on(&spec, 1, 1000, 1000);
    assert!(model.is_trained());
    assert!(report.epochs.len() <= 50);
    assert!(acc >= 0.85, "val accuracy {acc}");
}

#[test]
fn zero_signal_stays_at_chance() {
    let mut spec = binary_at_ceiling(0.92);
    spec.signal_amp = 0.0;
    assert_eq!(bayes_optimal_accuracy(&spec).unwrap(), 0.5);
    let (_, _, acc) = stage1_on(&spec, 2, 1000, 1000);
    assert!((0.45..=0.55).contains(&acc), "val accuracy {acc}");
}

#[test]
fn stage1_is_deterministic() {
    let spec = binary_at_ceiling(0.8);
    let (m1, mut r1, _) = stage1_on(&spec, 3, 200, 100);
    let (m2, mut r2, _) = stage1_on(&spec, 3, 200, 100);
    r1.wall_clock_s = 0.0;
    r2.wall_clock_s = 0.0;
    assert_eq!(r1, r2);
    assert_eq!(m1.checksum(), m2.checksum());
}

/// Frozen default-config models after a very short stage 1, plus small
/// stage-2 splits.
fn small_stage2() -> (ExperimentConfig, Vec<TaskModel>, Vec<Stage2Sample>, Vec<Stage2Sample>) {
    let mut cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).unwrap();
    cfg.data.stage1_train = 64;
    cfg.data.stage1_val = 32;
    cfg.stage1.max_epochs = 2;
    let (models, _) = ett_core::harness::runner::stage1(&cfg, 0).unwrap();
    let refs: Vec<&TaskModel> = models.iter().collect();
    let tc = translator_config(&cfg, &refs).unwrap();
    let train = generate(&cfg.specs(), cfg.clip, 48, 5, Split::Train).unwrap();
    let val = generate(&cfg.specs(), cfg.clip, 32, 5, Split::Val).unwrap();
    let tr = stage2_samples(&train, &refs, &tc).unwrap();
    let va = stage2_samples(&val, &refs, &tc).unwrap();
    (cfg, models, tr, va)
}

#[test]
fn stage2_contract_and_zero_learning_rate() {
    let (cfg, models, train, val) = small_stage2();
    let refs: Vec<&TaskModel> = models.iter().collect();
    let tc = translator_config(&cfg, &refs).unwrap();
    let init = Translator::new(tc.clone(), 9).unwrap();
    let frozen = TrainConfig {
        lr: 0.0,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let (tr, report) = train_stage2(&train, &val, &refs, tc.clone(), &frozen, cfg.clip.duration_s, 9).unwrap();
    assert_eq!(tr.params().checksum(), init.params().checksum());
    assert!(report.frozen_checksums_verified);
    assert_eq!(report.train.best_epoch, 0);
    let init_metric = report.train.epochs[0].val_metric;
    assert_eq!(report.train.best_val_metric, init_metric);
    assert_eq!(report.frozen_checksums.len(), 3);

    let sums: Vec<String> = models.iter().map(|m| m.checksum()).collect();
    let (_, report) = train_stage2(&train, &val, &refs, tc.clone(), &TrainConfig { max_epochs: 3, ..Default::default() }, cfg.clip.duration_s, 9).unwrap();
    assert!(report.frozen_checksums_verified);
    assert_eq!(models.iter().map(|m| m.checksum()).collect::<Vec<_>>(), sums);

    let mut spec = cfg.tasks[0].spec.clone();
    spec.task_id = "ttm".into();
    let unfrozen = TaskModel::new(model_config(&spec, cfg.tasks[0].shape()), 0).unwrap();
    let mixed: Vec<&TaskModel> = vec![&unfrozen, refs[1], refs[2]];
    assert!(matches!(
        train_stage2(&train, &val, &mixed, tc, &frozen, cfg.clip.duration_s, 9).map(|_| ()).unwrap_err().root(),
        Error::Contract(_)
    ));
}

#[test]
fn stage2_gradients_skip_frozen_parameters() {
    for kind in DECODER_KINDS {
        let (tr, feats) = ett_core::harness::check::toy_translator(0, kind, Default::default(), 3).unwrap();
        let (out, cache) = tr.forward_features(&feats).unwrap();
        let target = match &out {
            HeadOutput::Logit(_) => Target::Binary(true),
            HeadOutput::FrameScores(_) => Target::Keyframe(0),
            HeadOutput::Steps(s) => Target::Sequence(vec![(0, 0); s.len()]),
        };
        let (_, dout) = loss(&out, &target).unwrap();
        let g = tr.backward(&cache, &dout).unwrap();
        for (id, p) in tr.params().iter() {
            assert_eq!(g.get(id).is_some(), p.trainable, "{kind:?} {}", p.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adam_never_touches_frozen_entries(seed in 0u64..1000, steps in 1usize..20) {
        let mut r = rng(seed);
        let mut ps = ParamSet::new();
        let ids: Vec<_> = (0..4)
            .map(|i| ps.add(format!("p{i}"), Tensor2D::row_vector(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])).unwrap())
            .collect();
        for &id in &ids {
            if r.random_bool(0.5) {
                ps.set_trainable(id, false);
            }
        }
        let before = ps.clone();
        let mut state = OptimState::new(&ps, &TrainConfig::default());
        for _ in 0..steps {
            let mut g = Grads::for_trainable(&ps);
            for &id in &ids {
                if ps.is_trainable(id) {
                    g.set(id, Tensor2D::row_vector(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]));
                }
            }
            optimizer_step(&mut ps, &g, &mut state).unwrap();
        }
        for &id in &ids {
            if !ps.is_trainable(id) {
                prop_assert_eq!(ps.get(id), before.get(id));
            }
        }
    }
}
