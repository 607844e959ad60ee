//! Task heads shared by task models and the translator.
//!
//! * binary classification: mean-pool every row, linear `D → 1`
//! * temporal localization: shared linear `D → 1` on each row of a span
//! * sequence anticipation: mean-pool, then `Z` independent step heads each
//!   emitting verb and noun logits (stored as column blocks of one matrix)

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamId, ParamSet};
use crate::tensor::{dot, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderKind {
    BinaryClassification,
    TemporalLocalization,
    SequenceAnticipation {
        horizon: usize,
        n_verbs: usize,
        n_nouns: usize,
    },
}

impl DecoderKind {
    fn out_width(&self) -> usize {
        match *self {
            DecoderKind::BinaryClassification | DecoderKind::TemporalLocalization => 1,
            DecoderKind::SequenceAnticipation {
                horizon,
                n_verbs,
                n_nouns,
            } => horizon * (n_verbs + n_nouns),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DecoderKind::SequenceAnticipation {
            horizon,
            n_verbs,
            n_nouns,
        } = *self
        {
            if horizon == 0 {
                return Err(Error::InvalidArgument("horizon Z must be >= 1".into()));
            }
            if n_verbs == 0 || n_nouns == 0 {
                return Err(Error::InvalidArgument("vocabularies must be non-empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLogits {
    pub verb: Vec<f64>,
    pub noun: Vec<f64>,
}

/// Raw head outputs. The same shape carries gradients w.r.t. those outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadOutput {
    Logit(f64),
    FrameScores(Vec<f64>),
    Steps(Vec<StepLogits>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderParams {
    pub kind: DecoderKind,
    pub input_dim: usize,
    pub w: ParamId,
    /// Absent for localization: a shared offset cancels in the softmax.
    pub b: Option<ParamId>,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        kind: DecoderKind,
        input_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        kind.validate()?;
        let out = kind.out_width();
        Ok(Self {
            kind,
            input_dim,
            w: ps.add_normal(format!("{prefix}.w"), input_dim, out, std, rng)?,
            b: match kind {
                DecoderKind::TemporalLocalization => None,
                _ => Some(ps.add_zeros(format!("{prefix}.b"), 1, out)?),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    rows: usize,
    span_start: usize,
    input: Tensor2D,
}

/// `span` is `(start, len)` in rows of `z`; only the localization head reads it.
pub fn decode(
    z: &Tensor2D,
    span: (usize, usize),
    p: &DecoderParams,
    ps: &ParamSet,
) -> Result<(HeadOutput, DecoderCache)> {
    if z.rows() == 0 {
        return Err(Error::Empty("decoder"));
    }
    if z.cols() != p.input_dim {
        return Err(Error::dim(
            "decoder",
            format!("tokens {}", z.shape_str()),
            format!("input width {}", p.input_dim),
        ));
    }
    let w = ps.get(p.w);
    let zero = [0.0];
    let b = p.b.map_or(&zero[..], |b| ps.get(b).as_slice());
    match p.kind {
        DecoderKind::BinaryClassification => {
            let pooled = Tensor2D::row_vector(&z.col_means());
            let logit = dot(pooled.as_slice(), w.as_slice()) + b[0];
            Ok((
                HeadOutput::Logit(logit),
                DecoderCache {
                    rows: z.rows(),
                    span_start: 0,
                    input: pooled,
                },
            ))
        }
        DecoderKind::TemporalLocalization => {
            let (start, len) = span;
            if len == 0 {
                return Err(Error::Empty("localization span"));
            }
            let rows = z.slice_rows(start, len)?;
            let scores = rows.matmul(w)?.as_slice().to_vec();
            Ok((
                HeadOutput::FrameScores(scores),
                DecoderCache {
                    rows: z.rows(),
                    span_start: start,
                    input: rows,
                },
            ))
        }
        DecoderKind::SequenceAnticipation {
            horizon,
            n_verbs,
            n_nouns,
        } => {
            let pooled = Tensor2D::row_vector(&z.col_means());
            let mut logits = pooled.matmul(w)?;
            logits.add_row_broadcast(b)?;
            let l = logits.as_slice();
            let width = n_verbs + n_nouns;
            let steps = (0..horizon)
                .map(|s| StepLogits {
                    verb: l[s * width..s * width + n_verbs].to_vec(),
                    noun: l[s * width + n_verbs..(s + 1) * width].to_vec(),
                })
                .collect();
            Ok((
                HeadOutput::Steps(steps),
                DecoderCache {
                    rows: z.rows(),
                    span_start: 0,
                    input: pooled,
                },
            ))
        }
    }
}

/// Returns the gradient w.r.t. every row of `z`.
pub fn decode_backward(
    cache: &DecoderCache,
    dout: &HeadOutput,
    p: &DecoderParams,
    ps: &ParamSet,
    grads: &mut Grads,
) -> Result<Tensor2D> {
    let w = ps.get(p.w);
    let d = p.input_dim;
    let mut dz = Tensor2D::zeros(cache.rows, d);
    // gradient at the head's output columns, one row per head input row
    let dy = match (p.kind, dout) {
        (DecoderKind::BinaryClassification, HeadOutput::Logit(g)) => Tensor2D::row_vector(&[*g]),
        (DecoderKind::TemporalLocalization, HeadOutput::FrameScores(g)) => {
            if g.len() != cache.input.rows() {
                return Err(Error::dim(
                    "decode_backward",
                    format!("{} frame scores", cache.input.rows()),
                    format!("{} gradients", g.len()),
                ));
            }
            Tensor2D::from_vec(g.len(), 1, g.clone())?
        }
        (
            DecoderKind::SequenceAnticipation {
                horizon,
                n_verbs,
                n_nouns,
            },
            HeadOutput::Steps(steps),
        ) => {
            if steps.len() != horizon
                || steps
                    .iter()
                    .any(|s| s.verb.len() != n_verbs || s.noun.len() != n_nouns)
            {
                return Err(Error::dim(
                    "decode_backward",
                    format!("Z={horizon} x ({n_verbs}+{n_nouns})"),
                    format!("{} step gradients", steps.len()),
                ));
            }
            let flat: Vec<f64> = steps
                .iter()
                .flat_map(|s| s.verb.iter().chain(&s.noun).copied())
                .collect();
            Tensor2D::row_vector(&flat)
        }
        (kind, _) => {
            return Err(Error::InvalidArgument(format!(
                "gradient shape does not match decoder {kind:?}"
            )))
        }
    };
    grads.accumulate(p.w, &cache.input.t_matmul(&dy)?);
    if let Some(b) = p.b {
        grads.accumulate_vec(b, &dy.col_sums());
    }
    let dinput = dy.matmul_t(w)?;
    match p.kind {
        DecoderKind::TemporalLocalization => {
            for r in 0..dinput.rows() {
                dz.row_mut(cache.span_start + r).copy_from_slice(dinput.row(r));
            }
        }
        _ => {
            let inv = 1.0 / cache.rows as f64;
            let g: Vec<f64> = dinput.row(0).iter().map(|v| v * inv).collect();
            for r in 0..cache.rows {
                dz.row_mut(r).copy_from_slice(&g);
            }
        }
    }
    Ok(dz)
}

/// Index and timestamp of the highest score; ties go to the earliest frame.
pub fn keyframe_from_scores(scores: &[f64], times_s: &[f64]) -> Result<(usize, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("frame scores"));
    }
    if scores.len() != times_s.len() {
        return Err(Error::dim(
            "keyframe_from_scores",
            format!("{} scores", scores.len()),
            format!("{} timestamps", times_s.len()),
        ));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, times_s[best]))
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `(argmax verb, argmax noun)` per step.
pub fn sequence_argmax(steps: &[StepLogits]) -> Vec<(usize, usize)> {
    steps
        .iter()
        .map(|s| (argmax(&s.verb), argmax(&s.noun)))
        .collect()
}
