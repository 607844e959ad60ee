//! Evaluation metrics: accuracy, average precision, temporal localization
//! error and edit distance over anticipated action sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of candidate sequences scored by [`edit_distance_at_z`].
pub const DEFAULT_CANDIDATES: usize = 5;

pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions", predictions.len()),
            format!("{} labels", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over positives of precision at each positive's rank. Ranks sort by
/// score descending; equal scores keep their original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "average_precision",
            format!("{} scores", scores.len()),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("average_precision score {s}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// AP of a single binary task; one class, so mAP equals AP.
pub fn mean_average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    average_precision(scores, labels)
}

/// `|pred − true|` in seconds. Both times must lie in `[0, duration_s]`.
pub fn localization_error(pred_time_s: f64, true_time_s: f64, duration_s: f64) -> Result<f64> {
    for (what, t) in [("predicted", pred_time_s), ("true", true_time_s)] {
        if !(0.0..=duration_s).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "{what} time {t} s outside clip [0, {duration_s}] s"
            )));
        }
    }
    Ok((pred_time_s - true_time_s).abs())
}

/// Arithmetic mean of per-clip localization errors.
pub fn mean_localization_error(pairs: &[(f64, f64)], duration_s: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("mean_localization_error"));
    }
    let mut sum = 0.0;
    for &(p, t) in pairs {
        sum += localization_error(p, t, duration_s)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One anticipated action.
pub type Action = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditDistances {
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
}

/// Normalized edit distance (÷ Z), minimum over candidates, for verbs,
/// nouns and joint actions independently.
pub fn edit_distance_at_z(candidates: &[Vec<Action>], truth: &[Action]) -> Result<EditDistances> {
    if candidates.is_empty() {
        return Err(Error::Empty("edit_distance_at_z candidates"));
    }
    let z = truth.len();
    if z == 0 {
        return Err(Error::Empty("edit_distance_at_z truth"));
    }
    if let Some(c) = candidates.iter().find(|c| c.len() != z) {
        return Err(Error::dim(
            "edit_distance_at_z",
            format!("Z = {z}"),
            format!("candidate of length {}", c.len()),
        ));
    }
    let tv: Vec<usize> = truth.iter().map(|a| a.0).collect();
    let tn: Vec<usize> = truth.iter().map(|a| a.1).collect();
    let mut best = EditDistances {
        verb: f64::INFINITY,
        noun: f64::INFINITY,
        action: f64::INFINITY,
    };
    for c in candidates {
        let cv: Vec<usize> = c.iter().map(|a| a.0).collect();
        let cn: Vec<usize> = c.iter().map(|a| a.1).collect();
        best.verb = best.verb.min(levenshtein(&cv, &tv) as f64 / z as f64);
        best.noun = best.noun.min(levenshtein(&cn, &tn) as f64 / z as f64);
        best.action = best.action.min(levenshtein(c, truth) as f64 / z as f64);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub split: Split,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    /// Checks the value lies in the metric's codomain.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.metric.as_str() {
            "accuracy" | "map" | "ed_verb" | "ed_noun" | "ed_action" => (0.0..=1.0).contains(&self.value),
            "loc_error_s" => self.value >= 0.0,
            _ => self.value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "metric {} value {} outside its range",
                self.metric, self.value
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, false], &[true, false]).unwrap(), 1.0);
        let l = [true, false, true, false];
        assert_eq!(accuracy(&[true; 4], &l).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[true], &[true, false]).is_err());
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[3.0, 2.0, 1.0], &[true, true, false]).unwrap(), 1.0);
        assert!(matches!(
            average_precision(&[1.0], &[false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_ties_use_index_order() {
        // tie: index 0 (neg) ranks before index 1 (pos)
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn localization_examples() {
        assert_eq!(localization_error(2.0, 2.0, 8.0).unwrap(), 0.0);
        assert_eq!(localization_error(2.5, 2.0, 8.0).unwrap(), 0.5);
        assert!(localization_error(9.0, 2.0, 8.0).is_err());
    }

    #[test]
    fn edit_distance_examples() {
        let a = (0, 0);
        let b = (1, 1);
        let c = (2, 2);
        let ed = edit_distance_at_z(&[vec![a, b, c]], &[a, b, c]).unwrap();
        assert_eq!(ed.action, 0.0);
        let ed = edit_distance_at_z(&[vec![a, b, c]], &[a, c, c]).unwrap();
        assert!((ed.action - 1.0 / 3.0).abs() < 1e-15);
        let ed = edit_distance_at_z(&[vec![(5, 5); 3]], &[a, b, c]).unwrap();
        assert_eq!(ed.action, 1.0);
        assert!(edit_distance_at_z(&[vec![a]], &[a, b]).is_err());
    }

    #[test]
    fn edit_distance_takes_best_candidate_per_factor() {
        let truth = [(0, 1), (0, 1)];
        let cands = vec![vec![(0, 9), (0, 9)], vec![(9, 1), (9, 1)]];
        let ed = edit_distance_at_z(&cands, &truth).unwrap();
        assert_eq!((ed.verb, ed.noun, ed.action), (0.0, 0.0, 1.0));
    }
}
