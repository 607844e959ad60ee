//! Built-in invariant suite behind `ett run --check`: gradient checks on
//! every parameterized operation and metric agreement with brute-force
//! references.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::align::{FeatureSequence, FrameSeq};
use crate::decoder::{decode, decode_backward, DecoderKind, DecoderParams};
use crate::error::Result;
use crate::metrics;
use crate::nn::{
    encoder_layer, encoder_layer_backward, grad_check, layer_norm, layer_norm_backward, linear, linear_backward,
    multi_head_attention, multi_head_attention_backward, EncoderLayerParams, Grads, NormPlacement, ParamId,
    ParamSet, LN_EPS,
};
use crate::seed::rng_for;
use crate::task_models::{TaskModel, TaskModelConfig};
use crate::tensor::Tensor2D;
use crate::train::{loss, Target};
use crate::translator::{TaskSlot, Translator, TranslatorConfig};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor2D {
    let data = (0..rows * cols)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor2D::from_vec(rows, cols, data).expect("sized buffer")
}

/// Overwrites every parameter with `N(0, std)` noise; `*gamma*` entries get
/// `1 + N(0, std)` so layer norms stay well scaled.
pub fn randomize(ps: &mut ParamSet, std: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let gamma = ps.param(id).name.contains("gamma");
        for v in ps.get_mut(id).as_mut_slice() {
            let n: f64 = StandardNormal.sample(rng);
            *v = if gamma { 1.0 + std * n } else { std * n };
        }
    }
}

/// `L = Σ r ⊙ y` for a fixed random `r`; returns `(L, dL/dy)`.
fn probe_loss(y: &Tensor2D, r: &Tensor2D) -> (f64, Tensor2D) {
    (crate::tensor::dot(y.as_slice(), r.as_slice()), r.clone())
}

/// Linear layer under squared loss, input included as a parameter.
pub fn grad_check_linear(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, "check/linear");
    let mut ps = ParamSet::new();
    let x = ps.add("x", normal(&mut rng, 5, 4, 1.0))?;
    let w = ps.add("w", normal(&mut rng, 4, 3, 0.5))?;
    let b = ps.add("b", normal(&mut rng, 1, 3, 0.5))?;
    let target = normal(&mut rng, 5, 3, 1.0);
    let f = |p: &ParamSet| {
        let y = linear(p.get(x), p.get(w), Some(p.get(b).as_slice()))?;
        let diff = y.add(&target.scale(-1.0))?;
        let l = 0.5 * diff.as_slice().iter().map(|v| v * v).sum::<f64>();
        let g = linear_backward(p.get(x), p.get(w), &diff)?;
        let mut grads = Grads::for_trainable(p);
        grads.set(x, g.dx);
        grads.set(w, g.dw);
        grads.set(b, Tensor2D::row_vector(&g.db));
        Ok((l, grads))
    };
    grad_check(f, &ps, EPS)
}

pub fn grad_check_layer_norm(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, "check/layer_norm");
    let mut ps = ParamSet::new();
    let x = ps.add("x", normal(&mut rng, 4, 6, 1.0))?;
    let gamma = ps.add("gamma", normal(&mut rng, 1, 6, 0.3).map(|v| v + 1.0))?;
    let beta = ps.add("beta", normal(&mut rng, 1, 6, 0.3))?;
    let r = normal(&mut rng, 4, 6, 1.0);
    let f = |p: &ParamSet| {
        let (y, cache) = layer_norm(p.get(x), p.get(gamma).as_slice(), p.get(beta).as_slice(), LN_EPS)?;
        let (l, dy) = probe_loss(&y, &r);
        let g = layer_norm_backward(&cache, p.get(gamma).as_slice(), &dy);
        let mut grads = Grads::for_trainable(p);
        grads.set(x, g.dx);
        grads.accumulate_vec(gamma, &g.dgamma);
        grads.accumulate_vec(beta, &g.dbeta);
        Ok((l, grads))
    };
    grad_check(f, &ps, EPS)
}

fn encoder_fixture(seed: u64, tag: &str) -> Result<(ParamSet, ParamId, EncoderLayerParams, Tensor2D)> {
    let mut rng = rng_for(seed, tag);
    let mut ps = ParamSet::new();
    let (t, d, heads, d_ff) = (5, 6, 2, 8);
    let x = ps.add("x", normal(&mut rng, t, d, 1.0))?;
    let layer = EncoderLayerParams::init(&mut ps, "enc", d, heads, d_ff, 0.4, &mut rng)?;
    randomize_except(&mut ps, x, 0.4, &mut rng);
    let r = normal(&mut rng, t, d, 1.0);
    Ok((ps, x, layer, r))
}

fn randomize_except(ps: &mut ParamSet, keep: ParamId, std: f64, rng: &mut ChaCha8Rng) {
    let saved = ps.get(keep).clone();
    randomize(ps, std, rng);
    *ps.get_mut(keep) = saved;
}

pub fn grad_check_attention(seed: u64) -> Result<f64> {
    let (ps, x, layer, r) = encoder_fixture(seed, "check/attention")?;
    let f = |p: &ParamSet| {
        let (y, cache) = multi_head_attention(p.get(x), &layer, p)?;
        let (l, dy) = probe_loss(&y, &r);
        let mut grads = Grads::empty(p.len());
        let dx = multi_head_attention_backward(&cache, &dy, &layer, p, &mut grads)?;
        grads.set(x, dx);
        Ok((l, grads))
    };
    // only attention weights take part; freeze the rest
    let mut probe = ps.clone();
    let attn: Vec<ParamId> = vec![x, layer.wq, layer.bq, layer.wk, layer.wv, layer.bv, layer.wo, layer.bo];
    for id in ps.ids() {
        probe.set_trainable(id, attn.contains(&id));
    }
    grad_check(f, &probe, EPS)
}

pub fn grad_check_encoder(seed: u64, norm: NormPlacement) -> Result<f64> {
    let (ps, x, layer, r) = encoder_fixture(seed, "check/encoder")?;
    let f = |p: &ParamSet| {
        let (y, cache) = encoder_layer(p.get(x), &layer, p, norm)?;
        let (l, dy) = probe_loss(&y, &r);
        let mut grads = Grads::for_trainable(p);
        let dx = encoder_layer_backward(&cache, &dy, &layer, p, &mut grads)?;
        grads.set(x, dx);
        Ok((l, grads))
    };
    grad_check(f, &ps, EPS)
}

fn random_target(kind: DecoderKind, rows: usize, rng: &mut ChaCha8Rng) -> Target {
    match kind {
        DecoderKind::BinaryClassification => Target::Binary(rng.random_bool(0.5)),
        DecoderKind::TemporalLocalization => Target::Keyframe(rng.random_range(0..rows)),
        DecoderKind::SequenceAnticipation {
            horizon,
            n_verbs,
            n_nouns,
        } => Target::Sequence(
            (0..horizon)
                .map(|_| (rng.random_range(0..n_verbs), rng.random_range(0..n_nouns)))
                .collect(),
        ),
    }
}

pub const DECODER_KINDS: [DecoderKind; 3] = [
    DecoderKind::BinaryClassification,
    DecoderKind::TemporalLocalization,
    DecoderKind::SequenceAnticipation {
        horizon: 3,
        n_verbs: 3,
        n_nouns: 4,
    },
];

pub fn grad_check_decoder(seed: u64, kind: DecoderKind) -> Result<f64> {
    let mut rng = rng_for(seed, "check/decoder");
    let mut ps = ParamSet::new();
    let z = ps.add("z", normal(&mut rng, 6, 4, 1.0))?;
    let head = DecoderParams::init(&mut ps, "head", kind, 4, 0.5, &mut rng)?;
    randomize_except(&mut ps, z, 0.5, &mut rng);
    let span = (2, 3);
    let target = random_target(kind, span.1, &mut rng);
    let f = |p: &ParamSet| {
        let (out, cache) = decode(p.get(z), span, &head, p)?;
        let (l, dout) = loss(&out, &target)?;
        let mut grads = Grads::for_trainable(p);
        let dz = decode_backward(&cache, &dout, &head, p, &mut grads)?;
        grads.set(z, dz);
        Ok((l, grads))
    };
    grad_check(f, &ps, EPS)
}

pub fn grad_check_task_model(seed: u64, kind: DecoderKind) -> Result<f64> {
    let mut rng = rng_for(seed, "check/task_model");
    let cfg = TaskModelConfig {
        task_id: "toy".into(),
        native_fps: 2.0,
        native_window_s: 2.0,
        input_channels: vec![0, 2, 3],
        hidden_dim: 5,
        feature_dim: 4,
        mix_taps: 3,
        head: kind,
    };
    let mut model = TaskModel::new(cfg, seed)?;
    randomize(model.params_mut()?, 0.5, &mut rng);
    let clip = FrameSeq::new(normal(&mut rng, 4, 4, 1.0), 2.0, 2.0)?;
    let target = random_target(kind, 4, &mut rng);
    let base = model.params().clone();
    let f = |p: &ParamSet| {
        let mut m = model.clone();
        *m.params_mut()? = p.clone();
        let (out, cache) = m.forward(&clip)?;
        let (l, dout) = loss(&out, &target)?;
        Ok((l, m.backward(&cache, &dout)?))
    };
    grad_check(f, &base, EPS)
}

/// Small translator with random features for gradient and permutation
/// tests. Token counts and widths differ per task.
pub fn toy_translator(
    seed: u64,
    kind: DecoderKind,
    norm: NormPlacement,
    tasks: usize,
) -> Result<(Translator, Vec<FeatureSequence>)> {
    let mut rng = rng_for(seed, "check/translator");
    let shapes = [(3usize, 3usize), (2, 2), (4, 3)];
    let slots: Vec<TaskSlot> = shapes[..tasks]
        .iter()
        .enumerate()
        .map(|(i, &(t, d))| TaskSlot {
            task_id: format!("task{i}"),
            tokens: t,
            feature_dim: d,
            stride_s: 1.0,
        })
        .collect();
    let cfg = TranslatorConfig {
        d_model: 4,
        layers: 2,
        heads: 2,
        d_ff: 6,
        norm,
        merge: Default::default(),
        primary_task_id: "task0".into(),
        decoder: kind,
        tasks: slots.clone(),
        init_std: 0.4,
    };
    let mut tr = Translator::new(cfg, seed)?;
    randomize(tr.params_mut(), 0.4, &mut rng);
    let features = slots
        .iter()
        .map(|s| {
            let times = (0..s.tokens).map(|i| i as f64 * 0.5).collect();
            FeatureSequence::new(s.task_id.clone(), normal(&mut rng, s.tokens, s.feature_dim, 1.0), times)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tr, features))
}

/// Full stage-2 loss: projections, `P_task`, encoder stack and head.
pub fn grad_check_translator(seed: u64, kind: DecoderKind, norm: NormPlacement, tasks: usize) -> Result<f64> {
    let (tr, features) = toy_translator(seed, kind, norm, tasks)?;
    let mut rng = rng_for(seed, "check/translator/target");
    let target = random_target(kind, features[0].len(), &mut rng);
    let base = tr.params().clone();
    let f = |p: &ParamSet| {
        let mut t = tr.clone();
        *t.params_mut() = p.clone();
        let (out, cache) = t.forward_features(&features)?;
        let (l, dout) = loss(&out, &target)?;
        Ok((l, t.backward(&cache, &dout)?))
    };
    grad_check(f, &base, EPS)
}

/// Every gradient fixture at one seed, as `(name, max rel err)`.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = vec![
        ("linear".to_string(), grad_check_linear(seed)?),
        ("layer_norm".to_string(), grad_check_layer_norm(seed)?),
        ("attention".to_string(), grad_check_attention(seed)?),
        ("encoder_pre".to_string(), grad_check_encoder(seed, NormPlacement::Pre)?),
        ("encoder_post".to_string(), grad_check_encoder(seed, NormPlacement::Post)?),
    ];
    for kind in DECODER_KINDS {
        let k = crate::train::metric_name_for(kind);
        out.push((format!("decoder[{k}]"), grad_check_decoder(seed, kind)?));
        out.push((format!("task_model[{k}]"), grad_check_task_model(seed, kind)?));
        for norm in [NormPlacement::Pre, NormPlacement::Post] {
            out.push((
                format!("translator[{k},{norm:?}]"),
                grad_check_translator(seed, kind, norm, 3)?,
            ));
        }
    }
    Ok(out)
}

/// AP from explicit pairwise ranks, independent of any sort.
fn ap_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut pos: Vec<(usize, usize)> = (0..n).filter(|&i| labels[i]).map(|i| (rank(i), i)).collect();
    // sum in rank order so rounding matches a ranked sweep
    pos.sort();
    let mut sum = 0.0;
    for (k, &(r, _)) in pos.iter().enumerate() {
        sum += (k + 1) as f64 / r as f64;
    }
    sum / pos.len() as f64
}

/// Full-matrix Levenshtein table.
fn levenshtein_table<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

fn metric_checks(cases: usize) -> Vec<CheckResult> {
    let mut rng = rng_for(0, "check/metrics");
    let mut ap_bad = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[rng.random_range(0..n)] = true;
        if metrics::average_precision(&scores, &labels).ok() != Some(ap_pairwise(&scores, &labels)) {
            ap_bad += 1;
        }
    }
    let mut ed_bad = 0;
    for _ in 0..cases {
        let la = rng.random_range(0..7);
        let lb = rng.random_range(0..7);
        let a: Vec<(usize, usize)> = (0..la).map(|_| (rng.random_range(0..3), rng.random_range(0..3))).collect();
        let b: Vec<(usize, usize)> = (0..lb).map(|_| (rng.random_range(0..3), rng.random_range(0..3))).collect();
        if metrics::levenshtein(&a, &b) != levenshtein_table(&a, &b) {
            ed_bad += 1;
        }
    }
    let pairs: Vec<(f64, f64)> = (0..cases)
        .map(|_| (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)))
        .collect();
    let mut sum = 0.0;
    for &(p, t) in &pairs {
        sum += (p - t).abs();
    }
    let loc_ok = metrics::mean_localization_error(&pairs, 8.0).ok() == Some(sum / cases as f64);
    vec![
        CheckResult {
            name: "average_precision".into(),
            passed: ap_bad == 0,
            detail: format!("{ap_bad}/{cases} mismatches vs pairwise-rank reference"),
        },
        CheckResult {
            name: "edit_distance".into(),
            passed: ed_bad == 0,
            detail: format!("{ed_bad}/{cases} mismatches vs full DP table"),
        },
        CheckResult {
            name: "localization_error".into(),
            passed: loc_ok,
            detail: format!("mean over {cases} pairs vs loop"),
        },
    ]
}

/// Gradient suite over seeds `0..10` plus the metric references.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..10 {
        match gradient_suite(seed) {
            Ok(rs) => {
                for (name, err) in rs {
                    match worst.iter_mut().find(|w| w.0 == name) {
                        Some(w) => w.1 = w.1.max(err),
                        None => worst.push((name, err)),
                    }
                }
            }
            Err(e) => out.push(CheckResult {
                name: format!("gradient suite seed {seed}"),
                passed: false,
                detail: e.to_string(),
            }),
        }
    }
    for (name, err) in worst {
        out.push(CheckResult {
            passed: err < TOLERANCE,
            detail: format!("max rel err {err:.2e} over 10 seeds"),
            name: format!("grad_check {name}"),
        });
    }
    out.extend(metric_checks(1000));
    out
}
