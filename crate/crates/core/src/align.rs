//! Temporal alignment of a primary clip to a task model's native input:
//! frame-rate subsampling, sliding-window planning and per-window feature
//! extraction with overlap merging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

const ALIGN_TOL: f64 = 1e-9;

/// Frame count implied by a rate and a duration.
pub fn frame_count(fps: f64, duration_s: f64) -> usize {
    (fps * duration_s).round() as usize
}

fn frames_exact(seconds: f64, fps: f64, what: &str) -> Result<usize> {
    let f = seconds * fps;
    if (f - f.round()).abs() > ALIGN_TOL * f.abs().max(1.0) {
        return Err(Error::Alignment(format!(
            "{what} {seconds} s is not a whole number of frames at {fps} fps"
        )));
    }
    Ok(f.round() as usize)
}

fn same_rate(a: f64, b: f64) -> bool {
    (a - b).abs() <= ALIGN_TOL * a.abs().max(b.abs()).max(1.0)
}

/// A clip of per-frame channel vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSeq {
    frames: Tensor2D,
    fps: f64,
    duration_s: f64,
}

impl FrameSeq {
    pub fn new(frames: Tensor2D, fps: f64, duration_s: f64) -> Result<Self> {
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::InvalidArgument(format!("fps must be > 0, got {fps}")));
        }
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "duration must be > 0, got {duration_s}"
            )));
        }
        let expected = frame_count(fps, duration_s);
        if frames.rows() != expected {
            return Err(Error::dim(
                "FrameSeq::new",
                format!("{} frames", frames.rows()),
                format!("round({fps} fps x {duration_s} s) = {expected}"),
            ));
        }
        Ok(Self {
            frames,
            fps,
            duration_s,
        })
    }

    pub fn frames(&self) -> &Tensor2D {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        index as f64 / self.fps
    }
}

/// Source frame index used for output frame `j` when subsampling.
pub fn resample_index(j: usize, source_fps: f64, target_fps: f64, source_len: usize) -> usize {
    let idx = (j as f64 * source_fps / target_fps).round() as usize;
    idx.min(source_len.saturating_sub(1))
}

/// Nearest-index subsampling to `target_fps`. Upsampling is refused.
pub fn resample(clip: &FrameSeq, target_fps: f64) -> Result<FrameSeq> {
    if !(target_fps > 0.0) || !target_fps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target fps must be > 0, got {target_fps}"
        )));
    }
    if target_fps > clip.fps && !same_rate(target_fps, clip.fps) {
        return Err(Error::UpsamplingUnsupported {
            from: clip.fps,
            to: target_fps,
        });
    }
    if same_rate(target_fps, clip.fps) {
        return Ok(clip.clone());
    }
    let n = frame_count(target_fps, clip.duration_s);
    let mut out = Tensor2D::zeros(n, clip.channels());
    for j in 0..n {
        let src = resample_index(j, clip.fps, target_fps, clip.len());
        out.row_mut(j).copy_from_slice(clip.frames.row(src));
    }
    FrameSeq::new(out, target_fps, clip.duration_s)
}

/// Schedule of sliding windows over a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_s: f64,
    pub stride_s: f64,
    pub fps: f64,
    pub duration_s: f64,
    pub offsets_s: Vec<f64>,
    pub offsets_frames: Vec<usize>,
    pub window_frames: usize,
    pub total_frames: usize,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.offsets_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets_frames.is_empty()
    }
}

/// Windows start at `0, stride, 2·stride, …` while they fit; if the last one
/// stops short of the clip end, one more window is aligned to the end.
/// Plans that would leave a gap between windows are rejected.
pub fn plan_windows(duration_s: f64, window_s: f64, stride_s: f64, fps: f64) -> Result<WindowPlan> {
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be > 0, got {fps}")));
    }
    if !(window_s > 0.0) {
        return Err(Error::InvalidArgument(format!("window must be > 0 s, got {window_s}")));
    }
    if !(stride_s > 0.0) {
        return Err(Error::InvalidArgument(format!("stride must be > 0 s, got {stride_s}")));
    }
    if window_s > duration_s && !same_rate(window_s, duration_s) {
        return Err(Error::ClipTooShort {
            window_s,
            duration_s,
        });
    }
    let n = frames_exact(duration_s, fps, "duration")?;
    let w = frames_exact(window_s, fps, "window")?;
    let s = frames_exact(stride_s, fps, "stride")?;
    if w == 0 || s == 0 {
        return Err(Error::Alignment(format!(
            "window ({window_s} s) and stride ({stride_s} s) must span at least one frame at {fps} fps"
        )));
    }
    let mut offsets = Vec::new();
    let mut o = 0;
    while o + w <= n {
        offsets.push(o);
        o += s;
    }
    if let Some(&last) = offsets.last() {
        if last + w != n {
            offsets.push(n - w);
        }
    }
    if offsets.windows(2).any(|p| p[1] - p[0] > w) {
        return Err(Error::Alignment(format!(
            "stride {stride_s} s leaves frames between {window_s} s windows uncovered"
        )));
    }
    Ok(WindowPlan {
        window_s,
        stride_s,
        fps,
        duration_s,
        offsets_s: offsets.iter().map(|&o| o as f64 / fps).collect(),
        offsets_frames: offsets,
        window_frames: w,
        total_frames: n,
    })
}

/// Value precision of a feature sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Per-frame features of one task model over one clip (`T_k × D_k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    task_id: String,
    values: Tensor2D,
    frame_times_s: Vec<f64>,
    dtype: Dtype,
}

impl FeatureSequence {
    pub fn new(task_id: impl Into<String>, values: Tensor2D, frame_times_s: Vec<f64>) -> Result<Self> {
        if frame_times_s.len() != values.rows() {
            return Err(Error::dim(
                "FeatureSequence::new",
                format!("{} rows", values.rows()),
                format!("{} timestamps", frame_times_s.len()),
            ));
        }
        if let Some(w) = frame_times_s.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(format!(
                "timestamps must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            task_id: task_id.into(),
            values,
            frame_times_s,
            dtype: Dtype::F64,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn values(&self) -> &Tensor2D {
        &self.values
    }

    pub fn frame_times_s(&self) -> &[f64] {
        &self.frame_times_s
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// `T_k`
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// `D_k`
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Rounds every value to single precision.
    pub fn to_f32(&self) -> Self {
        Self {
            task_id: self.task_id.clone(),
            values: self.values.map(|v| v as f32 as f64),
            frame_times_s: self.frame_times_s.clone(),
            dtype: Dtype::F32,
        }
    }

    pub(crate) fn from_parts_unchecked(
        task_id: String,
        values: Tensor2D,
        frame_times_s: Vec<f64>,
        dtype: Dtype,
    ) -> Self {
        Self {
            task_id,
            values,
            frame_times_s,
            dtype,
        }
    }
}

/// The per-window part of a task model used for feature extraction.
pub trait FeatureExtractor {
    fn task_id(&self) -> &str;
    fn native_fps(&self) -> f64;
    fn native_window_s(&self) -> f64;
    fn feature_dim(&self) -> usize;
    fn is_frozen(&self) -> bool;
    /// `window_frames × D_k` features for one native-geometry window.
    fn trunk_forward(&self, window: &FrameSeq) -> Result<Tensor2D>;
}

/// How overlapping window outputs become one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// One row per clip frame; frames covered by several windows get the
    /// mean of their per-window features.
    #[default]
    PerFrame,
    /// One row per window: the mean of that window's frame features,
    /// stamped at the window centre.
    PooledPerWindow,
}

/// Number of feature rows a clip yields for a given plan.
pub fn feature_rows(plan: &WindowPlan, merge: MergeMode) -> usize {
    match merge {
        MergeMode::PerFrame => plan.total_frames,
        MergeMode::PooledPerWindow => plan.len(),
    }
}

pub fn extract_features<M: FeatureExtractor + ?Sized>(
    clip: &FrameSeq,
    model: &M,
    plan: &WindowPlan,
    merge: MergeMode,
) -> Result<FeatureSequence> {
    if !model.is_frozen() {
        return Err(Error::Contract(format!(
            "task model '{}' must be frozen before feature extraction",
            model.task_id()
        )));
    }
    if !same_rate(clip.fps, plan.fps) || !same_rate(clip.fps, model.native_fps()) {
        return Err(Error::Alignment(format!(
            "clip {} fps, plan {} fps, model '{}' {} fps",
            clip.fps,
            plan.fps,
            model.task_id(),
            model.native_fps()
        )));
    }
    if !same_rate(plan.window_s, model.native_window_s()) {
        return Err(Error::Alignment(format!(
            "plan window {} s does not match model '{}' native window {} s",
            plan.window_s,
            model.task_id(),
            model.native_window_s()
        )));
    }
    if plan.total_frames != clip.len() {
        return Err(Error::Alignment(format!(
            "plan covers {} frames but clip has {}",
            plan.total_frames,
            clip.len()
        )));
    }
    let d = model.feature_dim();
    let w = plan.window_frames;
    let run = |o: usize| -> Result<Tensor2D> {
        let window = FrameSeq::new(clip.frames.slice_rows(o, w)?, clip.fps, plan.window_s)?;
        let out = model.trunk_forward(&window)?;
        if out.shape() != (w, d) {
            return Err(Error::dim(
                "extract_features",
                format!("trunk output {}", out.shape_str()),
                format!("{w}x{d}"),
            ));
        }
        Ok(out)
    };
    let (values, times) = match merge {
        MergeMode::PerFrame => {
            let mut sums = Tensor2D::zeros(clip.len(), d);
            let mut counts = vec![0usize; clip.len()];
            for &o in &plan.offsets_frames {
                let out = run(o)?;
                for r in 0..w {
                    counts[o + r] += 1;
                    for (acc, v) in sums.row_mut(o + r).iter_mut().zip(out.row(r)) {
                        *acc += v;
                    }
                }
            }
            for (r, &c) in counts.iter().enumerate() {
                if c == 0 {
                    return Err(Error::Alignment(format!("frame {r} not covered by any window")));
                }
                let inv = 1.0 / c as f64;
                for v in sums.row_mut(r) {
                    *v *= inv;
                }
            }
            let times = (0..clip.len()).map(|i| clip.frame_time(i)).collect();
            (sums, times)
        }
        MergeMode::PooledPerWindow => {
            let mut pooled = Tensor2D::zeros(plan.len(), d);
            for (k, &o) in plan.offsets_frames.iter().enumerate() {
                pooled.row_mut(k).copy_from_slice(&run(o)?.col_means());
            }
            let times = plan
                .offsets_s
                .iter()
                .map(|o| o + plan.window_s / 2.0)
                .collect();
            (pooled, times)
        }
    };
    if !values.is_finite() {
        return Err(Error::NonFinite(format!("features of task '{}'", model.task_id())));
    }
    FeatureSequence::new(model.task_id(), values, times)
}
