//! Seeded synthetic multi-task clips with controlled cross-task structure.
//!
//! Every task owns a disjoint group of clip channels. Per sample a primary
//! latent `y_p ~ Bernoulli(0.5)` is drawn; a binary auxiliary copies it with
//! probability `corr_rho` and otherwise draws a fresh fair coin, so its label
//! correlation with the primary is `corr_rho`. Task latents are written into
//! their channel group as class-conditional means plus Gaussian noise.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::{frame_count, FrameSeq};
use crate::error::{Error, Result};
use crate::metrics::{Action, Split};
use crate::seed::rng_for;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Localization,
    Sequence {
        n_verbs: usize,
        n_nouns: usize,
        horizon: usize,
        /// Probability that the chain advances deterministically to
        /// `(v + 1, n + 1)`; otherwise the next state is uniform.
        transition_p: f64,
    },
}

fn default_amp() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default)]
    pub primary: bool,
    pub channels: Vec<usize>,
    pub noise_sigma: f64,
    pub corr_rho: f64,
    pub native_fps: f64,
    pub native_window_s: f64,
    /// Half the class-mean separation per channel.
    #[serde(default = "default_amp")]
    pub signal_amp: f64,
}

/// Shape of the generated clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipGeometry {
    pub duration_s: f64,
    pub fps: f64,
    pub channels: usize,
}

impl ClipGeometry {
    pub fn frames(&self) -> usize {
        frame_count(self.fps, self.duration_s)
    }
}

/// Validates a task list: one primary with `corr_rho = 1`, disjoint channel
/// groups inside the clip, sane noise and correlation values.
pub fn validate_specs(specs: &[TaskSpec], channels: usize) -> Result<()> {
    let primaries: Vec<_> = specs.iter().filter(|s| s.primary).collect();
    if primaries.len() != 1 {
        return Err(Error::Config(format!(
            "exactly one primary task required, found {}",
            primaries.len()
        )));
    }
    let mut owner = vec![None::<&str>; channels];
    let mut ids = std::collections::BTreeSet::new();
    for s in specs {
        if !ids.insert(s.task_id.as_str()) {
            return Err(Error::Config(format!("duplicate task id '{}'", s.task_id)));
        }
        if s.channels.is_empty() {
            return Err(Error::Config(format!("task '{}' has no channels", s.task_id)));
        }
        for &c in &s.channels {
            let slot = owner.get_mut(c).ok_or_else(|| {
                Error::Config(format!(
                    "task '{}' channel {c} outside clip with {channels} channels",
                    s.task_id
                ))
            })?;
            if let Some(other) = slot {
                return Err(Error::Config(format!(
                    "channel {c} claimed by both '{other}' and '{}'",
                    s.task_id
                )));
            }
            *slot = Some(&s.task_id);
        }
        if !(s.noise_sigma >= 0.0) || !s.noise_sigma.is_finite() {
            return Err(Error::Config(format!("task '{}' noise_sigma must be finite and >= 0", s.task_id)));
        }
        if !(0.0..=1.0).contains(&s.corr_rho) {
            return Err(Error::Config(format!("task '{}' corr_rho must be in [0, 1]", s.task_id)));
        }
        if s.primary && s.corr_rho != 1.0 {
            return Err(Error::Config(format!(
                "primary task '{}' must have corr_rho = 1",
                s.task_id
            )));
        }
        if let TaskKind::Sequence {
            n_verbs,
            n_nouns,
            horizon,
            transition_p,
        } = s.kind
        {
            if n_verbs == 0 || n_nouns == 0 || horizon == 0 {
                return Err(Error::Config(format!("task '{}' sequence sizes must be >= 1", s.task_id)));
            }
            if s.channels.len() < n_verbs + n_nouns {
                return Err(Error::Config(format!(
                    "task '{}' needs {} channels for its one-hot state",
                    s.task_id,
                    n_verbs + n_nouns
                )));
            }
            if !(0.0..=1.0).contains(&transition_p) {
                return Err(Error::Config(format!("task '{}' transition_p must be in [0, 1]", s.task_id)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskLabel {
    Binary { value: bool },
    Keyframe { frame: usize, time_s: f64 },
    Sequence { current: Action, future: Vec<Action> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub clip: FrameSeq,
    /// One label per spec, in spec order.
    pub labels: Vec<TaskLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub specs: Vec<TaskSpec>,
    pub geometry: ClipGeometry,
    pub seed: u64,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.task_id == task_id)
    }

    pub fn binary_labels(&self, task_id: &str) -> Option<Vec<bool>> {
        let k = self.task_index(task_id)?;
        self.samples
            .iter()
            .map(|s| match s.labels[k] {
                TaskLabel::Binary { value } => Some(value),
                _ => None,
            })
            .collect()
    }

    /// One JSON record per sample, for offline inspection.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, s) in self.samples.iter().enumerate() {
            let rec = serde_json::json!({
                "index": i,
                "split": self.split,
                "seed": self.seed,
                "labels": s.labels,
                "fps": s.clip.fps(),
                "duration_s": s.clip.duration_s(),
                "frames": (0..s.clip.len()).map(|r| s.clip.frames().row(r).to_vec()).collect::<Vec<_>>(),
            });
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn sign(j: usize) -> f64 {
    if j % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Generates `n` samples. Each sample draws from its own stream keyed by
/// `(seed, split, index)`, so samples can be produced in any order.
pub fn generate(
    specs: &[TaskSpec],
    geometry: ClipGeometry,
    n: usize,
    seed: u64,
    split: Split,
) -> Result<SyntheticDataset> {
    validate_specs(specs, geometry.channels)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let frames = geometry.frames();
    if frames == 0 {
        return Err(Error::InvalidArgument("clip geometry has no frames".into()));
    }
    let samples = (0..n)
        .map(|i| generate_sample(specs, geometry, frames, seed, split, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        specs: specs.to_vec(),
        geometry,
        seed,
        split,
        samples,
    })
}

fn generate_sample(
    specs: &[TaskSpec],
    g: ClipGeometry,
    frames: usize,
    seed: u64,
    split: Split,
    index: usize,
) -> Result<Sample> {
    let mut rng = rng_for(seed, &format!("synth/{split}/{index}"));
    let mut noise = || -> f64 { StandardNormal.sample(&mut rng) };
    // background channels carry unit noise
    let mut data: Vec<f64> = (0..frames * g.channels).map(|_| noise()).collect();
    let mut rng = rng_for(seed, &format!("synth/{split}/{index}/latents"));
    let y_p = rng.random_bool(0.5);
    let mut labels = Vec::with_capacity(specs.len());
    for spec in specs {
        let amp = spec.signal_amp;
        // mean[t][j] for channel j of the group
        let mut means = vec![vec![0.0; spec.channels.len()]; frames];
        let label = match spec.kind {
            TaskKind::Binary => {
                let y = if spec.primary || rng.random_bool(spec.corr_rho) {
                    y_p
                } else {
                    rng.random_bool(0.5)
                };
                let s = if y { amp } else { -amp };
                for row in &mut means {
                    for (j, m) in row.iter_mut().enumerate() {
                        *m = s * sign(j);
                    }
                }
                TaskLabel::Binary { value: y }
            }
            TaskKind::Localization => {
                let t_star = rng.random_range(0..frames);
                for (t, row) in means.iter_mut().enumerate() {
                    let s = if t >= t_star { amp } else { -amp };
                    for (j, m) in row.iter_mut().enumerate() {
                        *m = s * sign(j);
                    }
                }
                TaskLabel::Keyframe {
                    frame: t_star,
                    time_s: t_star as f64 / g.fps,
                }
            }
            TaskKind::Sequence {
                n_verbs,
                n_nouns,
                horizon,
                transition_p,
            } => {
                let current = (rng.random_range(0..n_verbs), rng.random_range(0..n_nouns));
                let mut state = current;
                let mut future = Vec::with_capacity(horizon);
                for _ in 0..horizon {
                    state = if rng.random_bool(transition_p) {
                        ((state.0 + 1) % n_verbs, (state.1 + 1) % n_nouns)
                    } else {
                        (rng.random_range(0..n_verbs), rng.random_range(0..n_nouns))
                    };
                    future.push(state);
                }
                for row in &mut means {
                    row[current.0] = amp;
                    row[n_verbs + current.1] = amp;
                }
                TaskLabel::Sequence { current, future }
            }
        };
        // replace the background noise in this group with mean + sigma-scaled noise
        for (t, row) in means.iter().enumerate() {
            for (j, &c) in spec.channels.iter().enumerate() {
                let v = &mut data[t * g.channels + c];
                *v = row[j] + spec.noise_sigma * *v;
            }
        }
        labels.push(label);
    }
    let clip = FrameSeq::new(Tensor2D::from_vec(frames, g.channels, data)?, g.fps, g.duration_s)?;
    Ok(Sample { clip, labels })
}

/// Errors unless every binary task's positive rate is within 5 points of
/// 0.5. Needs at least 1000 samples to be meaningful.
pub fn check_balance(ds: &SyntheticDataset) -> Result<()> {
    if ds.len() < 1000 {
        return Err(Error::InvalidArgument(format!(
            "balance check needs n >= 1000, got {}",
            ds.len()
        )));
    }
    for spec in ds.specs.iter().filter(|s| s.kind == TaskKind::Binary) {
        let labels = ds.binary_labels(&spec.task_id).expect("binary task");
        let rate = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        if (rate - 0.5).abs() > 0.05 {
            return Err(Error::Contract(format!(
                "task '{}' positive rate {rate:.3} is not within 0.05 of 0.5",
                spec.task_id
            )));
        }
    }
    Ok(())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Class separation, in noise standard deviations, of a binary task observed
/// at its native rate for `duration_s` seconds.
pub fn separation(spec: &TaskSpec, duration_s: f64) -> Result<f64> {
    if spec.kind != TaskKind::Binary {
        return Err(Error::InvalidArgument(format!(
            "task '{}' is not binary",
            spec.task_id
        )));
    }
    let n = (frame_count(spec.native_fps, duration_s) * spec.channels.len()) as f64;
    let signal = 2.0 * spec.signal_amp.abs() * n.sqrt();
    Ok(if signal == 0.0 {
        0.0
    } else if spec.noise_sigma == 0.0 {
        f64::INFINITY
    } else {
        signal / spec.noise_sigma
    })
}

/// Two-Gaussian Bayes accuracy `Φ(d/2)` over one native window.
pub fn bayes_optimal_accuracy(spec: &TaskSpec) -> Result<f64> {
    bayes_accuracy_over(spec, spec.native_window_s)
}

pub fn bayes_accuracy_over(spec: &TaskSpec, duration_s: f64) -> Result<f64> {
    let d = separation(spec, duration_s)?;
    Ok(normal_cdf(d / 2.0))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Discretized distribution of an auxiliary task's log-likelihood ratio for
/// `y_p = 1`, as (value, probability) points.
fn aux_llr_points(d: f64, q: f64) -> Vec<(f64, f64)> {
    let prior = (q / (1.0 - q)).ln();
    if d == 0.0 || q == 0.5 {
        return vec![(0.0, 1.0)];
    }
    if d > 40.0 {
        // aux latent is observed exactly
        return vec![(prior, q), (-prior, 1.0 - q)];
    }
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let lo = -d / 2.0 - 12.0;
    let hi = d / 2.0 + 12.0;
    let n = 6000;
    let h = (hi - lo) / n as f64;
    let phi = |x: f64| (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (0..=n)
        .map(|i| {
            let s = lo + i as f64 * h;
            let simpson = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let dens = q * phi(s - d / 2.0) + (1.0 - q) * phi(s + d / 2.0);
            let a = s * d;
            let llr = log_add_exp(lq + a, l1q) - log_add_exp(l1q + a, lq);
            (llr, dens * simpson * h / 3.0)
        })
        .collect()
}

fn rebin(mut pts: Vec<(f64, f64)>, max_points: usize) -> Vec<(f64, f64)> {
    if pts.len() <= max_points {
        return pts;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = pts.first().unwrap().0;
    let hi = pts.last().unwrap().0;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return pts;
    }
    let width = (hi - lo) / max_points as f64;
    let mut bins = vec![(0.0, 0.0); max_points + 1];
    for (v, w) in pts {
        let b = (((v - lo) / width) as usize).min(max_points);
        bins[b].0 += v * w;
        bins[b].1 += w;
    }
    bins.into_iter()
        .filter(|b| b.1 > 0.0)
        .map(|(vw, w)| (vw / w, w))
        .collect()
}

/// Bayes accuracy for the primary binary label when the primary evidence and
/// every binary auxiliary's evidence are combined optimally. Auxiliary labels
/// agree with the primary with probability `(1 + corr_rho) / 2`,
/// independently given `y_p`; non-binary auxiliaries carry no primary
/// information and are skipped. Evidence is observed at each task's native
/// rate over `duration_s`.
pub fn combined_bayes_accuracy(primary: &TaskSpec, auxiliaries: &[&TaskSpec], duration_s: f64) -> Result<f64> {
    let dp = separation(primary, duration_s)?;
    let mut dist = vec![(0.0, 1.0)];
    for aux in auxiliaries.iter().filter(|a| a.kind == TaskKind::Binary) {
        let d = separation(aux, duration_s)?;
        let q = (1.0 + aux.corr_rho) / 2.0;
        let pts = aux_llr_points(d, q);
        let mut next = Vec::with_capacity(dist.len() * pts.len());
        for &(a, wa) in &dist {
            for &(b, wb) in &pts {
                next.push((a + b, wa * wb));
            }
        }
        dist = rebin(next, 4000);
    }
    let total: f64 = dist.iter().map(|p| p.1).sum();
    let correct: f64 = dist
        .iter()
        .map(|&(l, w)| {
            let p = if dp == f64::INFINITY {
                1.0
            } else if dp == 0.0 {
                if l > 0.0 {
                    1.0
                } else if l == 0.0 {
                    0.5
                } else {
                    0.0
                }
            } else {
                normal_cdf(dp / 2.0 + l / dp)
            };
            w * p
        })
        .sum();
    Ok(correct / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, primary: bool, channels: Vec<usize>, sigma: f64, rho: f64) -> TaskSpec {
        TaskSpec {
            task_id: id.into(),
            kind: TaskKind::Binary,
            primary,
            channels,
            noise_sigma: sigma,
            corr_rho: rho,
            native_fps: 1.0,
            native_window_s: 4.0,
            signal_amp: 1.0,
        }
    }

    fn geom() -> ClipGeometry {
        ClipGeometry {
            duration_s: 4.0,
            fps: 1.0,
            channels: 4,
        }
    }

    #[test]
    fn overlapping_groups_rejected() {
        let specs = vec![spec("p", true, vec![0, 1], 1.0, 1.0), spec("a", false, vec![1, 2], 1.0, 0.5)];
        assert!(generate(&specs, geom(), 10, 0, Split::Train).is_err());
    }

    #[test]
    fn primary_must_have_unit_rho() {
        let specs = vec![spec("p", true, vec![0], 1.0, 0.5)];
        assert!(validate_specs(&specs, 4).is_err());
    }

    #[test]
    fn perfect_correlation_copies_labels() {
        let specs = vec![spec("p", true, vec![0, 1], 0.0, 1.0), spec("a", false, vec![2, 3], 0.0, 1.0)];
        let ds = generate(&specs, geom(), 200, 3, Split::Train).unwrap();
        assert_eq!(ds.binary_labels("p"), ds.binary_labels("a"));
    }

    #[test]
    fn bayes_limits() {
        let mut s = spec("p", true, vec![0], 1.0, 1.0);
        s.noise_sigma = 0.0;
        assert_eq!(bayes_optimal_accuracy(&s).unwrap(), 1.0);
        s.noise_sigma = 1e300;
        assert!((bayes_optimal_accuracy(&s).unwrap() - 0.5).abs() < 1e-12);
        s.kind = TaskKind::Localization;
        assert!(bayes_optimal_accuracy(&s).is_err());
    }

    #[test]
    fn combined_reduces_to_single_without_aux() {
        let s = spec("p", true, vec![0, 1], 3.0, 1.0);
        let single = bayes_accuracy_over(&s, 4.0).unwrap();
        let combined = combined_bayes_accuracy(&s, &[], 4.0).unwrap();
        assert!((single - combined).abs() < 1e-12);
    }

    #[test]
    fn combined_with_perfect_aux_reaches_agreement_rate() {
        let p = spec("p", true, vec![0], 1e9, 1.0);
        let a = spec("a", false, vec![1], 1e-9, 0.8);
        let acc = combined_bayes_accuracy(&p, &[&a], 4.0).unwrap();
        assert!((acc - 0.9).abs() < 1e-9, "{acc}");
    }
}
