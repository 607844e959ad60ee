//! Small per-task networks trained in stage 1 and frozen for stage 2.
//!
//! Trunk: per-frame `GELU(x·W1 + b1)·W2 + b2` over the task's channel group,
//! followed by a causal temporal mix `y_t = Σ_j α_j u_{t−j}` (truncated at
//! the window start, `α` learnable, initialised to a moving average).
//! Head: one of the [`crate::decoder`] forms, applied to the trunk output.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::align::{frame_count, FeatureExtractor, FrameSeq};
use crate::decoder::{decode, decode_backward, DecoderCache, DecoderKind, DecoderParams, HeadOutput};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, linear, linear_backward, Grads, ParamId, ParamSet, INIT_STD};
use crate::seed::rng_for;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModelConfig {
    pub task_id: String,
    pub native_fps: f64,
    pub native_window_s: f64,
    /// Clip channels this model reads.
    pub input_channels: Vec<usize>,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub mix_taps: usize,
    pub head: DecoderKind,
}

impl TaskModelConfig {
    pub fn window_frames(&self) -> usize {
        frame_count(self.native_fps, self.native_window_s)
    }

    pub fn validate(&self) -> Result<()> {
        let wf = self.native_fps * self.native_window_s;
        if !(self.native_fps > 0.0) || !(self.native_window_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "task '{}': native fps and window must be > 0",
                self.task_id
            )));
        }
        if (wf - wf.round()).abs() > 1e-9 * wf.max(1.0) {
            return Err(Error::Alignment(format!(
                "task '{}': native window {} s is not a whole number of frames at {} fps",
                self.task_id, self.native_window_s, self.native_fps
            )));
        }
        if self.input_channels.is_empty() || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "task '{}': channels, hidden and feature widths must be non-empty",
                self.task_id
            )));
        }
        if self.mix_taps == 0 {
            return Err(Error::InvalidArgument(format!(
                "task '{}': mix_taps must be >= 1",
                self.task_id
            )));
        }
        self.head.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskModel {
    config: TaskModelConfig,
    params: ParamSet,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    mix: ParamId,
    head: DecoderParams,
    frozen: bool,
    trained: bool,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    x: Tensor2D,
    pre: Tensor2D,
    act: Tensor2D,
    u: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct TaskForwardCache {
    trunk: TrunkCache,
    head: DecoderCache,
}

impl TaskModel {
    pub fn new(config: TaskModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &format!("task-model/{}", config.task_id));
        let mut ps = ParamSet::new();
        let g = config.input_channels.len();
        let w1 = ps.add_normal("trunk.w1", g, config.hidden_dim, INIT_STD, &mut rng)?;
        let b1 = ps.add_zeros("trunk.b1", 1, config.hidden_dim)?;
        let w2 = ps.add_normal("trunk.w2", config.hidden_dim, config.feature_dim, INIT_STD, &mut rng)?;
        let b2 = ps.add_zeros("trunk.b2", 1, config.feature_dim)?;
        let mix = ps.add(
            "trunk.mix",
            Tensor2D::filled(1, config.mix_taps, 1.0 / config.mix_taps as f64),
        )?;
        let head = DecoderParams::init(&mut ps, "head", config.head, config.feature_dim, INIT_STD, &mut rng)?;
        Ok(Self {
            config,
            params: ps,
            w1,
            b1,
            w2,
            b2,
            mix,
            head,
            frozen: false,
            trained: false,
        })
    }

    pub fn config(&self) -> &TaskModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameter access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::Contract(format!(
                "task model '{}' is frozen",
                self.config.task_id
            )));
        }
        Ok(&mut self.params)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Freezes every parameter. Idempotent. Freezing an untrained model is
    /// allowed (random-feature ablation) but logged.
    pub fn freeze(mut self) -> Self {
        if !self.trained && !self.frozen {
            warn!(
                "freezing task model '{}' before stage-1 training; its features are random",
                self.config.task_id
            );
        }
        self.frozen = true;
        self.params.freeze_all();
        self
    }

    fn check_window(&self, window: &FrameSeq) -> Result<()> {
        let expected = self.config.window_frames();
        let fps_ok = (window.fps() - self.config.native_fps).abs()
            <= 1e-9 * self.config.native_fps.max(1.0);
        if !fps_ok || window.len() != expected {
            return Err(Error::Alignment(format!(
                "task '{}' expects {} frames at {} fps, got {} frames at {} fps",
                self.config.task_id,
                expected,
                self.config.native_fps,
                window.len(),
                window.fps()
            )));
        }
        Ok(())
    }

    fn trunk_with_cache(&self, window: &FrameSeq) -> Result<(Tensor2D, TrunkCache)> {
        self.check_window(window)?;
        let ps = &self.params;
        let x = window.frames().select_cols(&self.config.input_channels)?;
        let pre = linear(&x, ps.get(self.w1), Some(ps.get(self.b1).as_slice()))?;
        let act = pre.map(gelu);
        let u = linear(&act, ps.get(self.w2), Some(ps.get(self.b2).as_slice()))?;
        let alpha = ps.get(self.mix).as_slice();
        let (t, d) = u.shape();
        let mut y = Tensor2D::zeros(t, d);
        for r in 0..t {
            for (j, &a) in alpha.iter().enumerate().take(r + 1) {
                let src = u.row(r - j).to_vec();
                for (o, v) in y.row_mut(r).iter_mut().zip(&src) {
                    *o += a * v;
                }
            }
        }
        Ok((y, TrunkCache { x, pre, act, u }))
    }

    fn trunk_backward(&self, c: &TrunkCache, dy: &Tensor2D, grads: &mut Grads) -> Result<()> {
        let ps = &self.params;
        let alpha = ps.get(self.mix).as_slice();
        let (t, d) = c.u.shape();
        let mut du = Tensor2D::zeros(t, d);
        let mut dalpha = vec![0.0; alpha.len()];
        for r in 0..t {
            for (j, &a) in alpha.iter().enumerate().take(r + 1) {
                let g = dy.row(r);
                dalpha[j] += crate::tensor::dot(g, c.u.row(r - j));
                for (o, v) in du.row_mut(r - j).iter_mut().zip(g) {
                    *o += a * v;
                }
            }
        }
        grads.accumulate_vec(self.mix, &dalpha);
        let g2 = linear_backward(&c.act, ps.get(self.w2), &du)?;
        grads.accumulate(self.w2, &g2.dw);
        grads.accumulate_vec(self.b2, &g2.db);
        let mut dpre = g2.dx;
        for (g, x) in dpre.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
            *g *= gelu_grad(*x);
        }
        let g1 = linear_backward(&c.x, ps.get(self.w1), &dpre)?;
        grads.accumulate(self.w1, &g1.dw);
        grads.accumulate_vec(self.b1, &g1.db);
        Ok(())
    }

    pub fn head_forward(&self, features: &Tensor2D) -> Result<HeadOutput> {
        Ok(decode(features, (0, features.rows()), &self.head, &self.params)?.0)
    }

    /// Trunk then head on one native-geometry clip.
    pub fn forward(&self, clip: &FrameSeq) -> Result<(HeadOutput, TaskForwardCache)> {
        let (feats, trunk) = self.trunk_with_cache(clip)?;
        let (out, head) = decode(&feats, (0, feats.rows()), &self.head, &self.params)?;
        Ok((out, TaskForwardCache { trunk, head }))
    }

    pub fn backward(&self, cache: &TaskForwardCache, dout: &HeadOutput) -> Result<Grads> {
        let mut grads = Grads::for_trainable(&self.params);
        let dfeat = decode_backward(&cache.head, dout, &self.head, &self.params, &mut grads)?;
        self.trunk_backward(&cache.trunk, &dfeat, &mut grads)?;
        Ok(grads)
    }

    /// Frame times of the model's own output rows for a native clip.
    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.config.window_frames())
            .map(|i| i as f64 / self.config.native_fps)
            .collect()
    }
}

impl FeatureExtractor for TaskModel {
    fn task_id(&self) -> &str {
        &self.config.task_id
    }

    fn native_fps(&self) -> f64 {
        self.config.native_fps
    }

    fn native_window_s(&self) -> f64 {
        self.config.native_window_s
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn trunk_forward(&self, window: &FrameSeq) -> Result<Tensor2D> {
        Ok(self.trunk_with_cache(window)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderKind;

    fn cfg(d: usize) -> TaskModelConfig {
        TaskModelConfig {
            task_id: "t".into(),
            native_fps: 2.0,
            native_window_s: 2.0,
            input_channels: vec![0, 2],
            hidden_dim: 5,
            feature_dim: d,
            mix_taps: 3,
            head: DecoderKind::BinaryClassification,
        }
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let m = TaskModel::new(cfg(4), 1).unwrap();
        let clip = FrameSeq::new(Tensor2D::zeros(4, 3), 2.0, 2.0).unwrap();
        let f = m.trunk_forward(&clip).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_geometry_rejected() {
        let m = TaskModel::new(cfg(4), 1).unwrap();
        let clip = FrameSeq::new(Tensor2D::zeros(8, 3), 4.0, 2.0).unwrap();
        assert!(matches!(m.trunk_forward(&clip), Err(Error::Alignment(_))));
    }

    #[test]
    fn freeze_is_idempotent_and_blocks_mutation() {
        let m = TaskModel::new(cfg(4), 1).unwrap();
        let sum = m.checksum();
        let mut m = m.freeze().freeze();
        assert!(m.is_frozen());
        assert!(m.params_mut().is_err());
        assert_eq!(m.checksum(), sum);
        assert!(m.params().iter().all(|(_, p)| !p.trainable));
    }

    #[test]
    fn non_integral_window_rejected() {
        let mut c = cfg(4);
        c.native_window_s = 1.25;
        assert!(TaskModel::new(c, 0).is_err());
    }
}
