//! End-to-end runs: generate → stage 1 → freeze → stage 2 → evaluate.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::cache::FeatureCache;
use super::config::{Arm, ExperimentConfig};
use super::report::{aggregate, report_file_name, write_json, Aggregate, Ceilings, RunReport};
use crate::align::{FeatureExtractor, MergeMode};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, Split};
use crate::seed::{derive_seed, rng_for};
use crate::synth::{
    bayes_accuracy_over, combined_bayes_accuracy, generate, ClipGeometry, SyntheticDataset, TaskKind, TaskLabel,
    TaskSpec,
};
use crate::task_models::TaskModel;
use crate::train::{
    decoder_for, evaluate_task_model, model_config, sequence_candidates, stage2_samples_with, train_stage2,
    train_task_model, Stage2Sample, TaskData, TrainReport,
};
use crate::translator::{extract_one, slot_for, Prediction, Translator, TranslatorConfig};

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run seeds `0..n` instead of the configured list.
    pub seeds: Option<usize>,
    pub arm: Option<Arm>,
    pub out_dir: Option<PathBuf>,
    /// Concurrent seed pipelines; `None` reads `ETT_NUM_WORKERS` (default 1).
    pub workers: Option<usize>,
}

pub fn workers_from_env() -> Result<usize> {
    match std::env::var("ETT_NUM_WORKERS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("ETT_NUM_WORKERS must be a positive integer, got '{v}'"))),
        },
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub reports: Vec<RunReport>,
    pub aggregate: Aggregate,
}

/// Runs every selected arm for every seed and writes reports under the
/// output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let seeds: Vec<u64> = match opts.seeds {
        Some(0) => return Err(Error::Config("--seeds must be >= 1".into())),
        Some(n) => (0..n as u64).collect(),
        None => cfg.seeds.clone(),
    };
    let arms: Vec<Arm> = match opts.arm {
        Some(a) => vec![a],
        None => cfg.arms.clone(),
    };
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let workers = match opts.workers {
        Some(n) => n.max(1),
        None => workers_from_env()?,
    };
    std::fs::create_dir_all(&out)?;
    let hash = cfg.hash();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Vec<RunReport>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers.min(seeds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let r = run_seed(cfg, seed, &arms, &out, &hash);
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|r| r.0);
    let mut reports = Vec::new();
    for (_, r) in results {
        reports.extend(r?);
    }
    let agg = aggregate(&reports, &hash)?;
    write_json(&out.join("aggregate.json"), &agg)?;
    Ok(RunOutcome {
        out_dir: out,
        reports,
        aggregate: agg,
    })
}

fn stage1_geometry(spec: &TaskSpec, clip: &ClipGeometry) -> ClipGeometry {
    ClipGeometry {
        duration_s: spec.native_window_s,
        fps: spec.native_fps,
        channels: clip.channels,
    }
}

/// Stage 1 for every task; returns frozen models in declared order.
pub fn stage1(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TaskModel>, Vec<TrainReport>)> {
    let specs = cfg.specs();
    let d = &cfg.data;
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for entry in &cfg.tasks {
        let spec = &entry.spec;
        let g = stage1_geometry(spec, &cfg.clip);
        let ds_seed = derive_seed(seed, &format!("stage1/{}", spec.task_id));
        let train = generate(&specs, g, d.stage1_train, ds_seed, Split::Train)?;
        let val = generate(&specs, g, d.stage1_val, ds_seed, Split::Val)?;
        let test = generate(&specs, g, d.stage1_val, ds_seed, Split::Test)?;
        let data = TaskData {
            spec,
            shape: entry.shape(),
            train: &train,
            val: &val,
        };
        let (model, mut report) = train_task_model(&data, &cfg.stage1, seed)?;
        report.test_metric = Some(evaluate_task_model(&model, &test)?.metric);
        info!(
            "seed {seed} stage 1 '{}': test {} {:.4}",
            spec.task_id,
            report.metric,
            report.test_metric.unwrap_or(f64::NAN)
        );
        models.push(model.freeze());
        reports.push(report);
    }
    Ok((models, reports))
}

/// Untrained trunks, frozen, for the random-feature ablation.
pub fn random_models(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskModel>> {
    cfg.tasks
        .iter()
        .map(|t| Ok(TaskModel::new(model_config(&t.spec, t.shape()), derive_seed(seed, "random-trunk"))?.freeze()))
        .collect()
}

/// Primary first, then auxiliaries in declared order; `primary_only`
/// keeps only the primary.
fn arm_models<'a>(cfg: &ExperimentConfig, models: &'a [TaskModel], arm: Arm) -> Vec<&'a TaskModel> {
    let primary = &cfg.primary().spec.task_id;
    let mut out: Vec<&TaskModel> = models.iter().filter(|m| m.task_id() == primary).collect();
    if arm != Arm::PrimaryOnly {
        out.extend(models.iter().filter(|m| m.task_id() != primary));
    }
    out
}

pub fn translator_config(cfg: &ExperimentConfig, models: &[&TaskModel]) -> Result<TranslatorConfig> {
    let tr = &cfg.translator;
    let primary = cfg.primary();
    let tasks = models
        .iter()
        .map(|m| slot_for(*m, cfg.clip.duration_s, tr.stride_s, tr.merge))
        .collect::<Result<Vec<_>>>()?;
    TranslatorConfig {
        d_model: tr.d_model,
        layers: tr.layers,
        heads: tr.heads,
        d_ff: tr.d_ff,
        norm: tr.norm,
        merge: tr.merge,
        primary_task_id: primary.spec.task_id.clone(),
        decoder: decoder_for(primary.spec.kind),
        tasks,
        init_std: tr.init_std,
    }
    .canonicalize()
}

#[derive(Serialize)]
struct ClipContext<'a> {
    specs: &'a [TaskSpec],
    geometry: &'a ClipGeometry,
    seed: u64,
    split: Split,
    stride_s: f64,
    merge: MergeMode,
}

/// Identity of a clip's extraction context; everything but the trunk.
fn clip_key(ds: &SyntheticDataset, stride_s: f64, merge: MergeMode) -> String {
    let ctx = ClipContext {
        specs: &ds.specs,
        geometry: &ds.geometry,
        seed: ds.seed,
        split: ds.split,
        stride_s,
        merge,
    };
    let text = serde_json::to_string(&ctx).expect("context serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Stage-2 samples, through the feature cache when one is given.
pub fn build_samples(
    ds: &SyntheticDataset,
    models: &[&TaskModel],
    config: &TranslatorConfig,
    cache: Option<&FeatureCache>,
) -> Result<Vec<Stage2Sample>> {
    let checksums: Vec<String> = models.iter().map(|m| m.checksum()).collect();
    let key = config
        .tasks
        .first()
        .map(|s| clip_key(ds, s.stride_s, config.merge))
        .unwrap_or_default();
    stage2_samples_with(ds, config, |i, clip| {
        models
            .iter()
            .zip(&config.tasks)
            .zip(&checksums)
            .map(|((m, slot), sum)| {
                let compute = || extract_one(clip, *m, slot, config.merge);
                match cache {
                    Some(c) => c.get_or_insert(&slot.task_id, sum, &format!("{key}-{i}"), compute),
                    None => Ok(compute()?.to_f32()),
                }
            })
            .collect()
    })
}

/// Test-split metrics of the primary task.
pub fn test_metrics(
    translator: &Translator,
    samples: &[Stage2Sample],
    duration_s: f64,
    candidates: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let preds = samples
        .iter()
        .map(|s| translator.predict_features(&s.features))
        .collect::<Result<Vec<_>>>()?;
    match translator.config().decoder {
        crate::decoder::DecoderKind::BinaryClassification => {
            let mut logits = Vec::new();
            let mut labels = Vec::new();
            for (p, s) in preds.iter().zip(samples) {
                match (p, &s.label) {
                    (Prediction::Binary { logit }, TaskLabel::Binary { value }) => {
                        logits.push(*logit);
                        labels.push(*value);
                    }
                    _ => return Err(Error::Contract("binary primary with non-binary output".into())),
                }
            }
            let hard: Vec<bool> = logits.iter().map(|&l| l > 0.0).collect();
            Ok(vec![
                ("accuracy".into(), metrics::accuracy(&hard, &labels)?),
                ("map".into(), metrics::mean_average_precision(&logits, &labels)?),
            ])
        }
        crate::decoder::DecoderKind::TemporalLocalization => {
            let pairs = preds
                .iter()
                .zip(samples)
                .map(|(p, s)| match (p, &s.label) {
                    (Prediction::Keyframe { time_s, .. }, TaskLabel::Keyframe { time_s: t, .. }) => Ok((*time_s, *t)),
                    _ => Err(Error::Contract("localization primary with other output".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![(
                "loc_error_s".into(),
                metrics::mean_localization_error(&pairs, duration_s)?,
            )])
        }
        crate::decoder::DecoderKind::SequenceAnticipation { .. } => {
            let mut sums = [0.0; 3];
            for (i, (p, s)) in preds.iter().zip(samples).enumerate() {
                let (Prediction::Sequence { steps, .. }, TaskLabel::Sequence { future, .. }) = (p, &s.label) else {
                    return Err(Error::Contract("sequence primary with other output".into()));
                };
                let mut rng = rng_for(seed, &format!("candidates/{i}"));
                let cands = sequence_candidates(steps, candidates, &mut rng);
                let ed = metrics::edit_distance_at_z(&cands, future)?;
                sums[0] += ed.verb;
                sums[1] += ed.noun;
                sums[2] += ed.action;
            }
            let n = samples.len() as f64;
            Ok(vec![
                ("ed_verb".into(), sums[0] / n),
                ("ed_noun".into(), sums[1] / n),
                ("ed_action".into(), sums[2] / n),
            ])
        }
    }
}

pub fn ceilings(cfg: &ExperimentConfig) -> Result<Option<Ceilings>> {
    let primary = &cfg.primary().spec;
    if primary.kind != TaskKind::Binary {
        return Ok(None);
    }
    let aux: Vec<&TaskSpec> = cfg.tasks.iter().map(|t| &t.spec).filter(|s| !s.primary).collect();
    Ok(Some(Ceilings {
        primary_only: bayes_accuracy_over(primary, cfg.clip.duration_s)?,
        combined: combined_bayes_accuracy(primary, &aux, cfg.clip.duration_s)?,
    }))
}

fn checkpoint_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!("seed{seed}"))
}

/// All requested arms for one seed. Stage 1 is shared across arms.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, arms: &[Arm], out: &Path, hash: &str) -> Result<Vec<RunReport>> {
    let start = Instant::now();
    let needs_trained = arms.iter().any(|a| *a != Arm::FrozenRandomAblation);
    let (trained, stage1_reports) = if needs_trained {
        stage1(cfg, seed)?
    } else {
        (Vec::new(), Vec::new())
    };
    let ckpt = checkpoint_dir(out, seed);
    for m in &trained {
        write_json(&ckpt.join(format!("stage1-{}.json", m.task_id())), m)?;
    }
    let specs = cfg.specs();
    let ds_seed = derive_seed(seed, "stage2");
    let d = &cfg.data;
    let train_ds = generate(&specs, cfg.clip, d.train, ds_seed, Split::Train)?;
    let val_ds = generate(&specs, cfg.clip, d.val, ds_seed, Split::Val)?;
    let test_ds = generate(&specs, cfg.clip, d.test, ds_seed, Split::Test)?;
    let cache = cfg.cache.enabled.then(|| FeatureCache::new(out.join("cache")));
    let ceil = ceilings(cfg)?;
    let stage1_secs = start.elapsed().as_secs_f64();

    let mut reports = Vec::new();
    for &arm in arms {
        let arm_start = Instant::now();
        let random;
        let pool: &[TaskModel] = if arm == Arm::FrozenRandomAblation {
            random = random_models(cfg, seed)?;
            &random
        } else {
            &trained
        };
        let models = arm_models(cfg, pool, arm);
        let tcfg = translator_config(cfg, &models)?;
        let train = build_samples(&train_ds, &models, &tcfg, cache.as_ref())?;
        let val = build_samples(&val_ds, &models, &tcfg, cache.as_ref())?;
        let test = build_samples(&test_ds, &models, &tcfg, cache.as_ref())?;
        let (translator, mut s2) = train_stage2(&train, &val, &models, tcfg, &cfg.stage2, cfg.clip.duration_s, seed)?;
        let metrics = test_metrics(&translator, &test, cfg.clip.duration_s, cfg.eval.candidates, seed)?;
        s2.train.test_metric = metrics.first().map(|m| m.1);
        write_json(&ckpt.join(format!("translator-{}.json", arm.name())), &translator)?;
        let metrics: Vec<MetricReport> = metrics
            .into_iter()
            .map(|(metric, value)| MetricReport {
                metric,
                value,
                n_samples: test.len(),
                split: Split::Test,
                seed,
                config_hash: hash.to_string(),
            })
            .collect();
        for m in &metrics {
            m.validate()?;
        }
        info!(
            "seed {seed} arm {}: {}",
            arm.name(),
            metrics
                .iter()
                .map(|m| format!("{} {:.4}", m.metric, m.value))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let report = RunReport {
            arm: arm.name().to_string(),
            seed,
            config_hash: hash.to_string(),
            metrics,
            ceilings: ceil,
            stage1: if arm == Arm::FrozenRandomAblation {
                Vec::new()
            } else {
                stage1_reports.clone()
            },
            frozen_checksums_verified: s2.frozen_checksums_verified,
            stage2: s2,
            wall_clock_s: stage1_secs + arm_start.elapsed().as_secs_f64(),
        };
        write_json(&out.join("reports").join(report_file_name(arm.name(), seed)), &report)?;
        reports.push(report);
    }
    Ok(reports)
}
