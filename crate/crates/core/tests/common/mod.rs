//! Reference implementations shared by the integration tests. Everything
//! here is written with plain loops over `Vec<Vec<f64>>`, independent of the
//! library's tensor code.
#![allow(dead_code)]

use ett_core::nn::ParamSet;
use ett_core::Tensor2D;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor2D {
    Tensor2D::from_rows(m).unwrap()
}

pub fn to_mat(t: &Tensor2D) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn param(ps: &ParamSet, name: &str) -> Mat {
    to_mat(ps.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

pub fn param_vec(ps: &ParamSet, name: &str) -> Vec<f64> {
    ps.by_name(name).unwrap().as_slice().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..row.len() {
                        s += row[k] * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Dense-loop multi-head attention; the key projection has no bias.
pub fn attention(x: &Mat, ps: &ParamSet, prefix: &str, heads: usize) -> Mat {
    let p = |s: &str| format!("{prefix}.attn.{s}");
    let q = add_bias(&matmul(x, &param(ps, &p("wq"))), &param_vec(ps, &p("bq")));
    let k = matmul(x, &param(ps, &p("wk")));
    let v = add_bias(&matmul(x, &param(ps, &p("wv"))), &param_vec(ps, &p("bv")));
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; t];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[i][c] * k[j][c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for j in 0..t {
                for c in h * dh..(h + 1) * dh {
                    concat[i][c] += a[j] * v[j][c];
                }
            }
        }
    }
    add_bias(&matmul(&concat, &param(ps, &p("wo"))), &param_vec(ps, &p("bo")))
}

pub fn ffn(x: &Mat, ps: &ParamSet, prefix: &str) -> Mat {
    let p = |s: &str| format!("{prefix}.ffn.{s}");
    let h: Mat = add_bias(&matmul(x, &param(ps, &p("w1"))), &param_vec(ps, &p("b1")))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add_bias(&matmul(&h, &param(ps, &p("w2"))), &param_vec(ps, &p("b2")))
}

pub fn encoder_layer(x: &Mat, ps: &ParamSet, prefix: &str, heads: usize, pre_norm: bool) -> Mat {
    let ln = |m: &Mat, which: &str| {
        layer_norm(
            m,
            &param_vec(ps, &format!("{prefix}.{which}.gamma")),
            &param_vec(ps, &format!("{prefix}.{which}.beta")),
            1e-5,
        )
    };
    if pre_norm {
        let r = add(x, &attention(&ln(x, "ln1"), ps, prefix, heads));
        add(&r, &ffn(&ln(&r, "ln2"), ps, prefix))
    } else {
        let r = ln(&add(x, &attention(x, ps, prefix, heads)), "ln1");
        ln(&add(&r, &ffn(&r, ps, prefix)), "ln2")
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn col_means(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// AP by enumerating every ranking and keeping the one that orders scores
/// descending with ties in index order.
pub fn ap_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let valid = |p: &[usize]| {
        p.windows(2)
            .all(|w| scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]))
    };
    let ranking = permutations(scores.len())
        .into_iter()
        .find(|p| valid(p))
        .expect("some ranking is sorted");
    let positives = labels.iter().filter(|&&l| l).count();
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &i) in ranking.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Full-table edit distance.
pub fn levenshtein_dp<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

/// Full-batch Adam on 32 random feature sets with random targets; returns the
/// mean training loss before every step and after the last one.
pub fn overfit_losses(
    kind: ett_core::decoder::DecoderKind,
    steps: usize,
    lr: f64,
    seed: u64,
) -> ett_core::Result<Vec<f64>> {
    use ett_core::align::FeatureSequence;
    use ett_core::decoder::DecoderKind;
    use ett_core::nn::Grads;
    use ett_core::train::{loss, optimizer_step, OptimState, Target, TrainConfig};
    use ett_core::translator::{TaskSlot, Translator, TranslatorConfig};

    let mut r = rng(seed);
    let shapes = [(4usize, 3usize), (3, 2)];
    let slots: Vec<TaskSlot> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(t, d))| TaskSlot {
            task_id: format!("t{i}"),
            tokens: t,
            feature_dim: d,
            stride_s: 1.0,
        })
        .collect();
    let config = TranslatorConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        norm: Default::default(),
        merge: Default::default(),
        primary_task_id: "t0".into(),
        decoder: kind,
        tasks: slots.clone(),
        init_std: ett_core::nn::INIT_STD,
    };
    let mut tr = Translator::new(config, seed)?;
    let data: Vec<(Vec<FeatureSequence>, Target)> = (0..32)
        .map(|_| {
            let feats = slots
                .iter()
                .map(|s| {
                    let times = (0..s.tokens).map(|i| i as f64).collect();
                    FeatureSequence::new(s.task_id.clone(), to_tensor(&random_mat(&mut r, s.tokens, s.feature_dim, 1.0)), times)
                })
                .collect::<ett_core::Result<Vec<_>>>()?;
            let target = match kind {
                DecoderKind::BinaryClassification => Target::Binary(r.random()),
                DecoderKind::TemporalLocalization => Target::Keyframe(r.random_range(0..shapes[0].0)),
                DecoderKind::SequenceAnticipation {
                    horizon,
                    n_verbs,
                    n_nouns,
                } => Target::Sequence(
                    (0..horizon)
                        .map(|_| (r.random_range(0..n_verbs), r.random_range(0..n_nouns)))
                        .collect(),
                ),
            };
            Ok((feats, target))
        })
        .collect::<ett_core::Result<_>>()?;
    let cfg = TrainConfig {
        lr,
        ..TrainConfig::default()
    };
    let mut state = OptimState::new(tr.params(), &cfg);
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut total = 0.0;
        let mut acc = Grads::for_trainable(tr.params());
        for (feats, target) in &data {
            let (out, cache) = tr.forward_features(feats)?;
            let (l, dout) = loss(&out, target)?;
            total += l;
            acc.add_assign(&tr.backward(&cache, &dout)?);
        }
        history.push(total / data.len() as f64);
        if step == steps {
            break;
        }
        acc.scale(1.0 / data.len() as f64);
        optimizer_step(tr.params_mut(), &acc, &mut state)?;
    }
    Ok(history)
}

/// Largest change of the classification logit over all orderings of the
/// three task blocks of a toy translator whose `P_task` is zeroed.
pub fn block_permutation_delta(seed: u64) -> ett_core::Result<f64> {
    use ett_core::decoder::{decode, DecoderKind, HeadOutput};
    use ett_core::harness::check::toy_translator;
    use ett_core::translator::{assemble_tokens, encode, project};

    let (tr, feats) = toy_translator(seed, DecoderKind::BinaryClassification, Default::default(), 3)?;
    let ps = tr.params();
    let projected: Vec<Tensor2D> = feats
        .iter()
        .map(|f| project(f, ps.get(tr.projection_id(f.task_id()).unwrap())))
        .collect::<ett_core::Result<_>>()?;
    let zero = Tensor2D::zeros(tr.config().total_tokens(), tr.config().d_model);
    let logit = |order: &[usize]| -> ett_core::Result<f64> {
        let blocks: Vec<(&str, &Tensor2D)> = order.iter().map(|&i| (feats[i].task_id(), &projected[i])).collect();
        let z0 = assemble_tokens(&blocks, &zero)?;
        let (z, _) = encode(&z0.tokens, tr.layers(), ps, tr.config().norm)?;
        match decode(&z, (0, z.rows()), tr.decoder(), ps)?.0 {
            HeadOutput::Logit(l) => Ok(l),
            _ => unreachable!("classification head"),
        }
    };
    let base = logit(&[0, 1, 2])?;
    let mut worst: f64 = 0.0;
    for p in permutations(3) {
        worst = worst.max((logit(&p)? - base).abs());
    }
    Ok(worst)
}

/// The default experiment shrunk to a few seconds of work.
pub fn tiny_config(out: &std::path::Path) -> ett_core::harness::ExperimentConfig {
    use ett_core::harness::{ExperimentConfig, DEFAULT_CONFIG};
    let mut cfg = ExperimentConfig::from_toml(DEFAULT_CONFIG).expect("default config");
    cfg.out_dir = out.to_path_buf();
    cfg.seeds = vec![0];
    cfg.data.stage1_train = 64;
    cfg.data.stage1_val = 32;
    cfg.data.train = 48;
    cfg.data.val = 32;
    cfg.data.test = 48;
    cfg.stage1.max_epochs = 2;
    cfg.stage2.max_epochs = 2;
    cfg
}

/// Every JSON file below `dir`, keyed by relative path, with timing removed.
pub fn reports_without_timing(dir: &std::path::Path) -> std::collections::BTreeMap<String, serde_json::Value> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, serde_json::Value>) {
        for entry in std::fs::read_dir(dir).expect("report dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&path).expect("report");
                let mut v: serde_json::Value = serde_json::from_str(&text).expect("json");
                ett_core::harness::report::strip_wall_clock(&mut v);
                let key = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(key, v);
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Offsets in frames by brute force: every start position that is a stride
/// multiple and fits, plus the end-aligned window when the last one falls short.
pub fn offsets_oracle(n: usize, w: usize, s: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=n - w).filter(|k| k % s == 0).collect();
    if *out.last().unwrap() != n - w {
        out.push(n - w);
    }
    out
}

pub fn has_gap(offsets: &[usize], w: usize) -> bool {
    let mut covered_to = 0;
    for &o in offsets {
        if o > covered_to {
            return true;
        }
        covered_to = covered_to.max(o + w);
    }
    false
}

/// Random valid (duration, window, stride, fps) tuple, returned alongside the frame counts.
pub fn fuzz_tuple(r: &mut impl Rng) -> ((f64, f64, f64, f64), (usize, usize, usize)) {
    let fps = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 8.0, 10.0, 30.0][r.random_range(0..9)];
    let n = r.random_range(1..200usize);
    let w = r.random_range(1..=n);
    let s = r.random_range(1..=n + 3);
    let secs = |f: usize| f as f64 / fps;
    ((secs(n), secs(w), secs(s), fps), (n, w, s))
}
