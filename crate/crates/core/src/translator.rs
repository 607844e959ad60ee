//! The task translator: per-task projection into a shared latent space,
//! concatenation along time with learned task positional embeddings,
//! a transformer encoder, and a primary-task decoder head.

use serde::{Deserialize, Serialize};

use crate::align::{
    extract_features, feature_rows, plan_windows, resample, FeatureExtractor, FeatureSequence,
    FrameSeq, MergeMode,
};
use crate::decoder::{
    decode, decode_backward, keyframe_from_scores, sequence_argmax, DecoderCache, DecoderKind,
    DecoderParams, HeadOutput, StepLogits,
};
use crate::error::{Error, Result};
use crate::nn::{
    encoder_layer, encoder_layer_backward, linear, EncoderLayerCache, EncoderLayerParams, Grads,
    NormPlacement, ParamId, ParamSet, INIT_STD,
};
use crate::seed::rng_for;
use crate::tensor::Tensor2D;

/// One task's place in the token sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSlot {
    pub task_id: String,
    /// `T_k`
    pub tokens: usize,
    /// `D_k`
    pub feature_dim: usize,
    /// Sliding-window hop used when extracting this task's features.
    pub stride_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default)]
    pub merge: MergeMode,
    pub primary_task_id: String,
    pub decoder: DecoderKind,
    /// Primary first, then auxiliaries in declared order.
    pub tasks: Vec<TaskSlot>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    INIT_STD
}

impl TranslatorConfig {
    /// Moves the primary slot to the front, keeping auxiliaries in order.
    pub fn canonicalize(mut self) -> Result<Self> {
        let pos = self
            .tasks
            .iter()
            .position(|t| t.task_id == self.primary_task_id)
            .ok_or_else(|| {
                Error::Config(format!(
                    "primary task '{}' is not among the translator tasks",
                    self.primary_task_id
                ))
            })?;
        let primary = self.tasks.remove(pos);
        self.tasks.insert(0, primary);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("translator needs at least one task".into()));
        }
        if self.tasks[0].task_id != self.primary_task_id {
            return Err(Error::Config(format!(
                "canonical order requires primary task '{}' first",
                self.primary_task_id
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(Error::Config(format!("duplicate task '{}'", t.task_id)));
            }
            if t.tokens == 0 || t.feature_dim == 0 {
                return Err(Error::Config(format!("task '{}' has an empty feature shape", t.task_id)));
            }
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("translator needs at least one encoder layer".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be > 0".into()));
        }
        self.decoder.validate()
    }

    /// `Σ T_k`
    pub fn total_tokens(&self) -> usize {
        self.tasks.iter().map(|t| t.tokens).sum()
    }
}

/// Builds the slot for one frozen model over clips of `clip_duration_s`.
pub fn slot_for<M: FeatureExtractor + ?Sized>(
    model: &M,
    clip_duration_s: f64,
    stride_s: f64,
    merge: MergeMode,
) -> Result<TaskSlot> {
    let plan = plan_windows(
        clip_duration_s,
        model.native_window_s(),
        stride_s,
        model.native_fps(),
    )?;
    Ok(TaskSlot {
        task_id: model.task_id().to_string(),
        tokens: feature_rows(&plan, merge),
        feature_dim: model.feature_dim(),
        stride_s,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub task_id: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor2D,
    pub spans: Vec<Span>,
}

impl TokenSequence {
    pub fn span(&self, task_id: &str) -> Option<&Span> {
        self.spans.iter().find(|s| s.task_id == task_id)
    }
}

/// `h_k · P_k`, no bias.
pub fn project(h: &FeatureSequence, p: &Tensor2D) -> Result<Tensor2D> {
    if h.dim() != p.rows() {
        return Err(Error::dim(
            "project",
            format!("h_{} {}", h.task_id(), h.values().shape_str()),
            format!("P_k {}", p.shape_str()),
        ));
    }
    linear(h.values(), p, None)
}

/// Concatenates projected blocks in the given order and adds `P_task`.
pub fn assemble_tokens(projected: &[(&str, &Tensor2D)], p_task: &Tensor2D) -> Result<TokenSequence> {
    let mut spans = Vec::with_capacity(projected.len());
    let mut start = 0;
    for (id, block) in projected {
        spans.push(Span {
            task_id: id.to_string(),
            start,
            len: block.rows(),
        });
        start += block.rows();
    }
    if start != p_task.rows() {
        return Err(Error::dim(
            "assemble_tokens",
            format!("{start} concatenated rows"),
            format!("P_task {}", p_task.shape_str()),
        ));
    }
    let blocks: Vec<&Tensor2D> = projected.iter().map(|(_, b)| *b).collect();
    let mut tokens = Tensor2D::concat_rows(&blocks)?;
    tokens.add_assign(p_task)?;
    Ok(TokenSequence { tokens, spans })
}

/// `L` encoder layers in sequence.
pub fn encode(
    z0: &Tensor2D,
    layers: &[EncoderLayerParams],
    ps: &ParamSet,
    norm: NormPlacement,
) -> Result<(Tensor2D, Vec<EncoderLayerCache>)> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("encode needs at least one layer".into()));
    }
    let mut z = z0.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, cache) = encoder_layer(&z, layer, ps, norm)?;
        z = next;
        caches.push(cache);
    }
    Ok((z, caches))
}

/// Primary-task prediction in its final form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Binary {
        logit: f64,
    },
    Keyframe {
        scores: Vec<f64>,
        frame_times_s: Vec<f64>,
        index: usize,
        time_s: f64,
    },
    Sequence {
        steps: Vec<StepLogits>,
        actions: Vec<(usize, usize)>,
    },
}

impl Prediction {
    /// Converts raw head output; `primary_times` are the primary span's timestamps.
    pub fn from_head(out: HeadOutput, primary_times: &[f64]) -> Result<Self> {
        Ok(match out {
            HeadOutput::Logit(logit) => Prediction::Binary { logit },
            HeadOutput::FrameScores(scores) => {
                let (index, time_s) = keyframe_from_scores(&scores, primary_times)?;
                Prediction::Keyframe {
                    scores,
                    frame_times_s: primary_times.to_vec(),
                    index,
                    time_s,
                }
            }
            HeadOutput::Steps(steps) => Prediction::Sequence {
                actions: sequence_argmax(&steps),
                steps,
            },
        })
    }

    pub fn probability(&self) -> Option<f64> {
        match self {
            Prediction::Binary { logit } => Some(sigmoid(*logit)),
            _ => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct TranslatorCache {
    inputs: Vec<Tensor2D>,
    spans: Vec<Span>,
    layers: Vec<EncoderLayerCache>,
    decoder: DecoderCache,
}

impl TranslatorCache {
    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn layer_caches(&self) -> &[EncoderLayerCache] {
        &self.layers
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Translator {
    config: TranslatorConfig,
    params: ParamSet,
    projections: Vec<ParamId>,
    p_task: ParamId,
    layers: Vec<EncoderLayerParams>,
    decoder: DecoderParams,
}

impl Translator {
    pub fn new(config: TranslatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "translator");
        let std = config.init_std;
        let mut ps = ParamSet::new();
        let projections = config
            .tasks
            .iter()
            .map(|t| {
                ps.add_normal(
                    format!("proj.{}", t.task_id),
                    t.feature_dim,
                    config.d_model,
                    std,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let p_task = ps.add_normal("p_task", config.total_tokens(), config.d_model, std, &mut rng)?;
        let layers = (0..config.layers)
            .map(|l| {
                EncoderLayerParams::init(
                    &mut ps,
                    &format!("layer{l}"),
                    config.d_model,
                    config.heads,
                    config.d_ff,
                    std,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderParams::init(&mut ps, "decoder", config.decoder, config.d_model, std, &mut rng)?;
        if config.decoder == DecoderKind::TemporalLocalization {
            // the last additive offset on every token cancels in the frame
            // softmax; its gradient is identically zero, so keep it fixed
            let last = layers.last().expect("validated: layers >= 1");
            let id = match config.norm {
                NormPlacement::Pre => last.b2,
                NormPlacement::Post => last.ln2_beta,
            };
            ps.set_trainable(id, false);
        }
        Ok(Self {
            config,
            params: ps,
            projections,
            p_task,
            layers,
            decoder,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn projection_id(&self, task_id: &str) -> Option<ParamId> {
        self.config
            .tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .map(|i| self.projections[i])
    }

    pub fn p_task_id(&self) -> ParamId {
        self.p_task
    }

    pub fn layers(&self) -> &[EncoderLayerParams] {
        &self.layers
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    fn check_features(&self, features: &[FeatureSequence]) -> Result<()> {
        if features.len() != self.config.tasks.len() {
            return Err(Error::dim(
                "translator",
                format!("{} task slots", self.config.tasks.len()),
                format!("{} feature sequences", features.len()),
            ));
        }
        for (slot, f) in self.config.tasks.iter().zip(features) {
            if slot.task_id != f.task_id() {
                return Err(Error::Contract(format!(
                    "feature order mismatch: expected '{}', got '{}'",
                    slot.task_id,
                    f.task_id()
                )));
            }
            if f.len() != slot.tokens || f.dim() != slot.feature_dim {
                return Err(Error::dim(
                    "translator",
                    format!("slot '{}' {}x{}", slot.task_id, slot.tokens, slot.feature_dim),
                    format!("features {}", f.values().shape_str()),
                ));
            }
        }
        Ok(())
    }

    /// Project, assemble and add `P_task`.
    pub fn assemble(&self, features: &[FeatureSequence]) -> Result<TokenSequence> {
        self.check_features(features)?;
        let projected = features
            .iter()
            .zip(&self.projections)
            .map(|(f, &p)| project(f, self.params.get(p)))
            .collect::<Result<Vec<_>>>()?;
        let named: Vec<(&str, &Tensor2D)> = features
            .iter()
            .map(|f| f.task_id())
            .zip(projected.iter())
            .collect();
        assemble_tokens(&named, self.params.get(self.p_task))
    }

    /// Features in canonical order → raw head output.
    pub fn forward_features(&self, features: &[FeatureSequence]) -> Result<(HeadOutput, TranslatorCache)> {
        let z0 = self.assemble(features)?;
        let (z, layers) = encode(&z0.tokens, &self.layers, &self.params, self.config.norm)?;
        let primary = &z0.spans[0];
        let (out, decoder) = decode(&z, (primary.start, primary.len), &self.decoder, &self.params)?;
        Ok((
            out,
            TranslatorCache {
                inputs: features.iter().map(|f| f.values().clone()).collect(),
                spans: z0.spans,
                layers,
                decoder,
            },
        ))
    }

    pub fn predict_features(&self, features: &[FeatureSequence]) -> Result<Prediction> {
        let (out, _) = self.forward_features(features)?;
        Prediction::from_head(out, features[0].frame_times_s())
    }

    /// Gradients w.r.t. every translator parameter. Task models are not part
    /// of this graph.
    pub fn backward(&self, cache: &TranslatorCache, dout: &HeadOutput) -> Result<Grads> {
        let mut grads = Grads::for_trainable(&self.params);
        let mut dz = decode_backward(&cache.decoder, dout, &self.decoder, &self.params, &mut grads)?;
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dz = encoder_layer_backward(lc, &dz, layer, &self.params, &mut grads)?;
        }
        grads.accumulate(self.p_task, &dz);
        for ((span, input), &p) in cache.spans.iter().zip(&cache.inputs).zip(&self.projections) {
            let dblock = dz.slice_rows(span.start, span.len)?;
            grads.accumulate(p, &input.t_matmul(&dblock)?);
        }
        grads.retain_trainable(&self.params);
        Ok(grads)
    }
}

/// Resample, window and extract features for every translator task from one
/// primary clip. `models` must be in the translator's canonical order.
pub fn extract_all<M: FeatureExtractor>(
    clip: &FrameSeq,
    models: &[&M],
    config: &TranslatorConfig,
) -> Result<Vec<FeatureSequence>> {
    if models.len() != config.tasks.len() {
        return Err(Error::dim(
            "extract_all",
            format!("{} task slots", config.tasks.len()),
            format!("{} models", models.len()),
        ));
    }
    models
        .iter()
        .zip(&config.tasks)
        .map(|(m, slot)| {
            let id = slot.task_id.as_str();
            if m.task_id() != id {
                return Err(Error::Contract(format!(
                    "model order mismatch: expected '{id}', got '{}'",
                    m.task_id()
                )));
            }
            extract_one(clip, *m, slot, config.merge)
        })
        .collect()
}

/// Resample, window and extract one frozen model's features for `slot`.
pub fn extract_one<M: FeatureExtractor + ?Sized>(
    clip: &FrameSeq,
    m: &M,
    slot: &TaskSlot,
    merge: MergeMode,
) -> Result<FeatureSequence> {
    let id = slot.task_id.as_str();
    if !m.is_frozen() {
        return Err(Error::Contract(format!("task model '{id}' is not frozen")).at_stage("extract", id));
    }
    let view = resample(clip, m.native_fps()).map_err(|e| e.at_stage("resample", id))?;
    let plan = plan_windows(view.duration_s(), m.native_window_s(), slot.stride_s, m.native_fps())
        .map_err(|e| e.at_stage("plan_windows", id))?;
    extract_features(&view, m, &plan, merge).map_err(|e| e.at_stage("extract", id))
}

/// Full pipeline on one raw clip.
pub fn forward<M: FeatureExtractor>(
    clip: &FrameSeq,
    models: &[&M],
    translator: &Translator,
) -> Result<Prediction> {
    let features = extract_all(clip, models, translator.config())?;
    let (out, _) = translator
        .forward_features(&features)
        .map_err(|e| e.at_stage("translate", &translator.config().primary_task_id))?;
    Prediction::from_head(out, features[0].frame_times_s())
}
