//! Losses, the Adam optimizer and the two training stages.
//!
//! Stage 1 fits each task model on its own dataset. Stage 2 freezes them,
//! extracts their features once, and fits only the translator.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::FeatureSequence;
use crate::decoder::{sequence_argmax, DecoderKind, HeadOutput, StepLogits};
use crate::error::{Error, Result};
use crate::metrics::{self, Action};
use crate::nn::{log_sum_exp, Grads, ParamSet};
use crate::seed::rng_for;
use crate::synth::{SyntheticDataset, TaskKind, TaskLabel, TaskSpec};
use crate::task_models::{TaskModel, TaskModelConfig};
use crate::translator::{extract_all, sigmoid, Prediction, Translator, TranslatorConfig};

/// Training target in the units of the head output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Binary(bool),
    /// Row index of the keyframe within the scored span.
    Keyframe(usize),
    Sequence(Vec<Action>),
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn cross_entropy(logits: &[f64], k: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let grad = logits.iter().map(|v| (v - lse).exp()).collect::<Vec<_>>();
    let mut grad = grad;
    grad[k] -= 1.0;
    (lse - logits[k], grad)
}

/// Loss and its gradient w.r.t. the head output.
///
/// * binary: sigmoid cross-entropy on the logit
/// * keyframe: softmax cross-entropy over frame scores
/// * sequence: mean over steps of `(verb CE + noun CE) / 2`
pub fn loss(out: &HeadOutput, target: &Target) -> Result<(f64, HeadOutput)> {
    match (out, target) {
        (HeadOutput::Logit(x), Target::Binary(y)) => {
            let y = if *y { 1.0 } else { 0.0 };
            Ok((softplus(*x) - y * x, HeadOutput::Logit(sigmoid(*x) - y)))
        }
        (HeadOutput::FrameScores(s), Target::Keyframe(k)) => {
            if *k >= s.len() {
                return Err(Error::LabelOutOfRange(format!(
                    "keyframe {k} with {} frames",
                    s.len()
                )));
            }
            let (l, g) = cross_entropy(s, *k);
            Ok((l, HeadOutput::FrameScores(g)))
        }
        (HeadOutput::Steps(steps), Target::Sequence(truth)) => {
            if steps.len() != truth.len() {
                return Err(Error::dim(
                    "sequence loss",
                    format!("{} steps", steps.len()),
                    format!("{} labels", truth.len()),
                ));
            }
            let z = steps.len() as f64;
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(steps.len());
            for (s, &(v, n)) in steps.iter().zip(truth) {
                if v >= s.verb.len() || n >= s.noun.len() {
                    return Err(Error::LabelOutOfRange(format!(
                        "action ({v}, {n}) with vocab ({}, {})",
                        s.verb.len(),
                        s.noun.len()
                    )));
                }
                let (lv, gv) = cross_entropy(&s.verb, v);
                let (ln, gn) = cross_entropy(&s.noun, n);
                total += (lv + ln) / 2.0;
                let scale = 1.0 / (2.0 * z);
                grads.push(StepLogits {
                    verb: gv.into_iter().map(|g| g * scale).collect(),
                    noun: gn.into_iter().map(|g| g * scale).collect(),
                });
            }
            Ok((total / z, HeadOutput::Steps(grads)))
        }
        _ => Err(Error::InvalidArgument(
            "head output and target kinds differ".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            patience: 10,
            max_epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be >= 0 and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("eps, batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments, one slot per parameter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl OptimState {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let slots = |ps: &ParamSet| {
            ps.iter()
                .map(|(_, p)| p.trainable.then(|| vec![0.0; p.value.len()]))
                .collect()
        };
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: slots(params),
            v: slots(params),
        }
    }
}

/// One Adam update over the trainable parameters. `grads` must hold exactly
/// one entry per trainable parameter and none for frozen ones.
pub fn optimizer_step(params: &mut ParamSet, grads: &Grads, state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::GradientMismatch(format!(
            "{} parameters, {} gradient slots, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let p = params.param(id);
        match (p.trainable, grads.get(id)) {
            (true, None) => {
                return Err(Error::GradientMismatch(format!("missing gradient for '{}'", p.name)))
            }
            (false, Some(_)) => {
                return Err(Error::GradientMismatch(format!(
                    "gradient supplied for frozen parameter '{}'",
                    p.name
                )))
            }
            (true, Some(g)) if g.shape() != p.value.shape() => {
                return Err(Error::GradientMismatch(format!(
                    "gradient {} for '{}' {}",
                    g.shape_str(),
                    p.name,
                    p.value.shape_str()
                )))
            }
            (true, Some(_)) if state.m[id.index()].is_none() => {
                return Err(Error::GradientMismatch(format!(
                    "optimizer has no slot for '{}'",
                    p.name
                )))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let m = state.m[id.index()].as_mut().expect("checked above");
        let v = state.v[id.index()].as_mut().expect("checked above");
        let w = params.get_mut(id).as_mut_slice();
        for i in 0..w.len() {
            let gi = g.as_slice()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: String,
    pub seed: u64,
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epoch at which patience ran out, if it did.
    pub early_stop_epoch: Option<usize>,
    pub best_val_metric: f64,
    /// Filled by the caller once the held-out split is scored.
    pub test_metric: Option<f64>,
    pub steps: u64,
    pub wall_clock_s: f64,
}

/// Validation summary; `score` is higher-is-better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
    pub score: f64,
}

/// Something trainable sample by sample.
pub trait Learner {
    type Sample;
    fn param_set(&self) -> &ParamSet;
    fn param_set_mut(&mut self) -> Result<&mut ParamSet>;
    fn sample_grad(&self, sample: &Self::Sample) -> Result<(f64, Grads)>;
    fn evaluate(&self, samples: &[Self::Sample]) -> Result<Evaluation>;
    fn metric_name(&self) -> &'static str;
}

/// Mini-batch Adam with early stopping on the validation score; the best
/// parameters are restored at the end.
pub fn fit<L: Learner>(
    learner: &mut L,
    task_id: &str,
    train: &[L::Sample],
    val: &[L::Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation split"));
    }
    let start = Instant::now();
    let mut rng = rng_for(seed, &format!("shuffle/{task_id}"));
    let mut state = OptimState::new(learner.param_set(), cfg);
    let init = learner.evaluate(val)?;
    let mut best = (init.score, learner.param_set().clone(), 0usize);
    let mut report = TrainReport {
        task_id: task_id.to_string(),
        seed,
        metric: learner.metric_name().to_string(),
        epochs: Vec::new(),
        best_epoch: 0,
        early_stop_epoch: None,
        best_val_metric: init.metric,
        test_metric: None,
        steps: 0,
        wall_clock_s: 0.0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Grads::for_trainable(learner.param_set());
            for &i in batch {
                let (l, g) = learner.sample_grad(&train[i])?;
                if !l.is_finite() || !g.is_finite() {
                    return Err(Error::Divergence(format!(
                        "task '{task_id}' epoch {epoch}: non-finite loss or gradient"
                    )));
                }
                epoch_loss += l;
                acc.add_assign(&g);
            }
            acc.scale(1.0 / batch.len() as f64);
            optimizer_step(learner.param_set_mut()?, &acc, &mut state)?;
        }
        let ev = learner.evaluate(val)?;
        if !ev.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "task '{task_id}' epoch {epoch}: validation loss {}",
                ev.loss
            )));
        }
        let train_loss = epoch_loss / train.len() as f64;
        debug!(
            "{task_id} epoch {epoch}: train {train_loss:.4} val {:.4} {} {:.4}",
            ev.loss,
            learner.metric_name(),
            ev.metric
        );
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: ev.loss,
            val_metric: ev.metric,
        });
        if ev.score > best.0 {
            best = (ev.score, learner.param_set().clone(), epoch);
            report.best_val_metric = ev.metric;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.early_stop_epoch = Some(epoch);
                break;
            }
        }
    }
    *learner.param_set_mut()? = best.1;
    report.best_epoch = best.2;
    report.steps = state.step;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    info!(
        "{task_id}: best {} {:.4} at epoch {}",
        report.metric, report.best_val_metric, report.best_epoch
    );
    Ok(report)
}

/// Head kind matching a synthetic task kind.
pub fn decoder_for(kind: TaskKind) -> DecoderKind {
    match kind {
        TaskKind::Binary => DecoderKind::BinaryClassification,
        TaskKind::Localization => DecoderKind::TemporalLocalization,
        TaskKind::Sequence {
            n_verbs,
            n_nouns,
            horizon,
            ..
        } => DecoderKind::SequenceAnticipation {
            horizon,
            n_verbs,
            n_nouns,
        },
    }
}

/// Nearest row by time; ties go to the earlier row.
pub fn nearest_index(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, &ti) in times.iter().enumerate() {
        if (ti - t).abs() < (times[best] - t).abs() {
            best = i;
        }
    }
    best
}

/// Training target for a label given the timestamps of the scored rows.
pub fn target_for(label: &TaskLabel, times: &[f64]) -> Target {
    match label {
        TaskLabel::Binary { value } => Target::Binary(*value),
        TaskLabel::Keyframe { time_s, .. } => Target::Keyframe(nearest_index(times, *time_s)),
        TaskLabel::Sequence { future, .. } => Target::Sequence(future.clone()),
    }
}

/// Per-kind validation metric: accuracy, mean localization error (s) or
/// action edit distance of the argmax sequence.
fn score_predictions(preds: &[Prediction], labels: &[&TaskLabel], duration_s: f64) -> Result<(f64, f64)> {
    match labels.first() {
        Some(TaskLabel::Binary { .. }) => {
            let p: Vec<bool> = preds
                .iter()
                .map(|p| matches!(p, Prediction::Binary { logit } if *logit > 0.0))
                .collect();
            let l: Vec<bool> = labels
                .iter()
                .map(|l| matches!(l, TaskLabel::Binary { value: true }))
                .collect();
            let acc = metrics::accuracy(&p, &l)?;
            Ok((acc, acc))
        }
        Some(TaskLabel::Keyframe { .. }) => {
            let pairs = preds
                .iter()
                .zip(labels)
                .map(|(p, l)| match (p, l) {
                    (Prediction::Keyframe { time_s, .. }, TaskLabel::Keyframe { time_s: t, .. }) => {
                        Ok((*time_s, *t))
                    }
                    _ => Err(Error::InvalidArgument("mixed prediction kinds".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            let err = metrics::mean_localization_error(&pairs, duration_s)?;
            Ok((err, -err))
        }
        Some(TaskLabel::Sequence { .. }) => {
            let mut sum = 0.0;
            for (p, l) in preds.iter().zip(labels) {
                match (p, l) {
                    (Prediction::Sequence { actions, .. }, TaskLabel::Sequence { future, .. }) => {
                        sum += metrics::edit_distance_at_z(&[actions.clone()], future)?.action;
                    }
                    _ => return Err(Error::InvalidArgument("mixed prediction kinds".into())),
                }
            }
            let ed = sum / preds.len() as f64;
            Ok((ed, -ed))
        }
        None => Err(Error::Empty("evaluation split")),
    }
}

struct Stage1Learner {
    model: TaskModel,
    task_index: usize,
    times: Vec<f64>,
    duration_s: f64,
}

impl Learner for Stage1Learner {
    type Sample = crate::synth::Sample;

    fn param_set(&self) -> &ParamSet {
        self.model.params()
    }

    fn param_set_mut(&mut self) -> Result<&mut ParamSet> {
        self.model.params_mut()
    }

    fn sample_grad(&self, s: &Self::Sample) -> Result<(f64, Grads)> {
        let (out, cache) = self.model.forward(&s.clip)?;
        let (l, dout) = loss(&out, &target_for(&s.labels[self.task_index], &self.times))?;
        Ok((l, self.model.backward(&cache, &dout)?))
    }

    fn evaluate(&self, samples: &[Self::Sample]) -> Result<Evaluation> {
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(samples.len());
        for s in samples {
            let (out, _) = self.model.forward(&s.clip)?;
            total += loss(&out, &target_for(&s.labels[self.task_index], &self.times))?.0;
            preds.push(Prediction::from_head(out, &self.times)?);
        }
        let labels: Vec<&TaskLabel> = samples.iter().map(|s| &s.labels[self.task_index]).collect();
        let (metric, score) = score_predictions(&preds, &labels, self.duration_s)?;
        Ok(Evaluation {
            loss: total / samples.len() as f64,
            metric,
            score,
        })
    }

    fn metric_name(&self) -> &'static str {
        metric_name_for(self.model.config().head)
    }
}

pub fn metric_name_for(kind: DecoderKind) -> &'static str {
    match kind {
        DecoderKind::BinaryClassification => "accuracy",
        DecoderKind::TemporalLocalization => "loc_error_s",
        DecoderKind::SequenceAnticipation { .. } => "ed_action",
    }
}

/// Architecture of the stage-1 trunk for one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrunkShape {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub mix_taps: usize,
}

pub fn model_config(spec: &TaskSpec, shape: TrunkShape) -> TaskModelConfig {
    TaskModelConfig {
        task_id: spec.task_id.clone(),
        native_fps: spec.native_fps,
        native_window_s: spec.native_window_s,
        input_channels: spec.channels.clone(),
        hidden_dim: shape.hidden_dim,
        feature_dim: shape.feature_dim,
        mix_taps: shape.mix_taps,
        head: decoder_for(spec.kind),
    }
}

/// Stage-1 data for one task: clips at that task's native geometry.
pub struct TaskData<'a> {
    pub spec: &'a TaskSpec,
    pub shape: TrunkShape,
    pub train: &'a SyntheticDataset,
    pub val: &'a SyntheticDataset,
}

/// Trains one task model on its own data and marks it trained.
pub fn train_task_model(data: &TaskData<'_>, cfg: &TrainConfig, seed: u64) -> Result<(TaskModel, TrainReport)> {
    let spec = data.spec;
    let task_index = data
        .train
        .task_index(&spec.task_id)
        .ok_or_else(|| Error::Config(format!("dataset has no task '{}'", spec.task_id)))?;
    let model = TaskModel::new(model_config(spec, data.shape), seed)?;
    let times = model.frame_times();
    let mut learner = Stage1Learner {
        model,
        task_index,
        times,
        duration_s: data.train.geometry.duration_s,
    };
    let report = fit(&mut learner, &spec.task_id, &data.train.samples, &data.val.samples, cfg, seed)
        .map_err(|e| e.at_stage("stage1", &spec.task_id))?;
    let mut model = learner.model;
    model.mark_trained();
    Ok((model, report))
}

/// Loss and metric of a task model on its own task's labels in `ds`.
pub fn evaluate_task_model(model: &TaskModel, ds: &SyntheticDataset) -> Result<Evaluation> {
    use crate::align::FeatureExtractor;
    let task_index = ds
        .task_index(model.task_id())
        .ok_or_else(|| Error::Config(format!("dataset has no task '{}'", model.task_id())))?;
    Stage1Learner {
        model: model.clone(),
        task_index,
        times: model.frame_times(),
        duration_s: ds.geometry.duration_s,
    }
    .evaluate(&ds.samples)
}

/// Stage 1: every task model trained independently.
pub fn train_stage1(tasks: &[TaskData<'_>], cfg: &TrainConfig, seed: u64) -> Result<Vec<(TaskModel, TrainReport)>> {
    tasks.iter().map(|t| train_task_model(t, cfg, seed)).collect()
}

/// One primary-task example with its frozen-model features.
#[derive(Debug, Clone)]
pub struct Stage2Sample {
    /// Canonical translator order.
    pub features: Vec<FeatureSequence>,
    pub target: Target,
    pub label: TaskLabel,
}

/// Extracts features from raw clips for every sample of a primary dataset.
/// Features are rounded to f32, the cache precision, so cached and fresh
/// extraction agree bit for bit.
pub fn stage2_samples(
    ds: &SyntheticDataset,
    models: &[&TaskModel],
    config: &TranslatorConfig,
) -> Result<Vec<Stage2Sample>> {
    stage2_samples_with(ds, config, |_, clip| {
        Ok(extract_all(clip, models, config)?
            .into_iter()
            .map(|f| f.to_f32())
            .collect())
    })
}

/// Like [`stage2_samples`] with a caller-supplied extractor `(index, clip)`.
pub fn stage2_samples_with<F>(ds: &SyntheticDataset, config: &TranslatorConfig, mut extract: F) -> Result<Vec<Stage2Sample>>
where
    F: FnMut(usize, &crate::align::FrameSeq) -> Result<Vec<FeatureSequence>>,
{
    let k = ds.task_index(&config.primary_task_id).ok_or_else(|| {
        Error::Config(format!(
            "dataset has no primary task '{}'",
            config.primary_task_id
        ))
    })?;
    ds.samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let features = extract(i, &s.clip)?;
            let times = features
                .first()
                .ok_or(Error::Empty("feature list"))?
                .frame_times_s();
            Ok(Stage2Sample {
                target: target_for(&s.labels[k], times),
                label: s.labels[k].clone(),
                features,
            })
        })
        .collect()
}

struct Stage2Learner {
    translator: Translator,
    duration_s: f64,
}

impl Learner for Stage2Learner {
    type Sample = Stage2Sample;

    fn param_set(&self) -> &ParamSet {
        self.translator.params()
    }

    fn param_set_mut(&mut self) -> Result<&mut ParamSet> {
        Ok(self.translator.params_mut())
    }

    fn sample_grad(&self, s: &Stage2Sample) -> Result<(f64, Grads)> {
        let (out, cache) = self.translator.forward_features(&s.features)?;
        let (l, dout) = loss(&out, &s.target)?;
        Ok((l, self.translator.backward(&cache, &dout)?))
    }

    fn evaluate(&self, samples: &[Stage2Sample]) -> Result<Evaluation> {
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(samples.len());
        for s in samples {
            let (out, _) = self.translator.forward_features(&s.features)?;
            total += loss(&out, &s.target)?.0;
            preds.push(Prediction::from_head(out, s.features[0].frame_times_s())?);
        }
        let labels: Vec<&TaskLabel> = samples.iter().map(|s| &s.label).collect();
        let (metric, score) = score_predictions(&preds, &labels, self.duration_s)?;
        Ok(Evaluation {
            loss: total / samples.len() as f64,
            metric,
            score,
        })
    }

    fn metric_name(&self) -> &'static str {
        metric_name_for(self.translator.config().decoder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub train: TrainReport,
    /// `(task_id, checksum)` of every frozen model before training.
    pub frozen_checksums: Vec<(String, String)>,
    pub frozen_checksums_verified: bool,
}

/// Stage 2: only translator parameters are updated. Every task model must
/// be frozen; their checksums are compared before and after.
pub fn train_stage2(
    train: &[Stage2Sample],
    val: &[Stage2Sample],
    models: &[&TaskModel],
    config: TranslatorConfig,
    cfg: &TrainConfig,
    clip_duration_s: f64,
    seed: u64,
) -> Result<(Translator, Stage2Report)> {
    use crate::align::FeatureExtractor;
    if let Some(m) = models.iter().find(|m| !m.is_frozen()) {
        return Err(Error::Contract(format!(
            "task model '{}' is not frozen at stage 2",
            m.task_id()
        )));
    }
    let before: Vec<(String, String)> = models
        .iter()
        .map(|m| (m.task_id().to_string(), m.checksum()))
        .collect();
    let primary = config.primary_task_id.clone();
    let mut learner = Stage2Learner {
        translator: Translator::new(config, seed)?,
        duration_s: clip_duration_s,
    };
    let report = fit(&mut learner, &primary, train, val, cfg, seed).map_err(|e| e.at_stage("stage2", &primary))?;
    let verified = models
        .iter()
        .zip(&before)
        .all(|(m, (_, sum))| &m.checksum() == sum);
    if !verified {
        return Err(Error::Contract("frozen task model parameters changed during stage 2".into()));
    }
    Ok((
        learner.translator,
        Stage2Report {
            train: report,
            frozen_checksums: before,
            frozen_checksums_verified: verified,
        },
    ))
}

/// Candidate action sequences: the per-step argmax, then `count − 1`
/// sequences sampled from the per-step softmax.
pub fn sequence_candidates<R: Rng + ?Sized>(steps: &[StepLogits], count: usize, rng: &mut R) -> Vec<Vec<Action>> {
    let mut out = vec![sequence_argmax(steps)];
    let sample = |logits: &[f64], rng: &mut R| {
        let p = crate::nn::softmax(logits).expect("finite logits");
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    };
    for _ in 1..count {
        out.push(
            steps
                .iter()
                .map(|s| (sample(&s.verb, rng), sample(&s.noun, rng)))
                .collect(),
        );
    }
    out
}
