//! AUC and accuracy over predicted correctness probabilities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EncodedDataset;
use crate::model::{forward_logits, Mode, ModelParams, Real};
use crate::train::PROB_CLAMP;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub accuracy: f64,
    pub mean_bce: f64,
    pub n_predictions: usize,
    pub n_positive: usize,
}

impl MetricsReport {
    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("auc", format!("{:.6}", self.auc)),
            ("accuracy", format!("{:.6}", self.accuracy)),
            ("mean_bce", format!("{:.6}", self.mean_bce)),
            ("n_predictions", self.n_predictions.to_string()),
            ("n_positive", self.n_positive.to_string()),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<14} {value:>12}");
        }
        out
    }
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
///
/// Sorts once and walks tie groups; the pair count is accumulated in exact
/// integer arithmetic and divided once at the end.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {s} is not a number")));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the number of (positive, negative) pairs won by the positive.
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// One event's prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEvent {
    pub user_id: u64,
    /// Index in the user's history.
    pub event: usize,
    pub score: f64,
    pub label: u8,
}

/// Inference-mode predictions for every distinct event of the dataset,
/// ordered by `(user_id, event)`. An event covered by several overlapping
/// windows is scored once, by the window in which it has the most preceding
/// events (the earliest-starting one).
pub fn score_events<F: Real>(params: &ModelParams<F>, dataset: &EncodedDataset) -> Result<Vec<ScoredEvent>> {
    let per_window: Vec<Vec<ScoredEvent>> = dataset
        .windows
        .par_iter()
        .map(|w| {
            let pass = forward_logits(params, w, Mode::Infer)?;
            Ok(pass
                .positions()
                .iter()
                .zip(pass.probs())
                .enumerate()
                .map(|(k, (&pos, &p))| ScoredEvent {
                    user_id: w.user_id,
                    event: w.first_event as usize + k,
                    score: p.as_f64(),
                    label: w.target[pos],
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut best: BTreeMap<(u64, usize), (u32, ScoredEvent)> = BTreeMap::new();
    for (w, events) in dataset.windows.iter().zip(per_window) {
        for e in events {
            let entry = best.entry((e.user_id, e.event)).or_insert((w.first_event, e));
            if w.first_event < entry.0 {
                *entry = (w.first_event, e);
            }
        }
    }
    Ok(best.into_values().map(|(_, e)| e).collect())
}

pub fn report_from_scores(events: &[ScoredEvent]) -> Result<MetricsReport> {
    let scores: Vec<f64> = events.iter().map(|e| e.score).collect();
    let labels: Vec<u8> = events.iter().map(|e| e.label).collect();
    let auc = auc(&scores, &labels)?;
    let n = events.len();
    let correct = events.iter().filter(|e| (e.score >= 0.5) == (e.label == 1)).count();
    Ok(MetricsReport {
        auc,
        accuracy: correct as f64 / n as f64,
        mean_bce: bce_of(events),
        n_predictions: n,
        n_positive: labels.iter().filter(|&&l| l == 1).count(),
    })
}

fn bce_of(events: &[ScoredEvent]) -> f64 {
    let total: f64 = events
        .iter()
        .map(|e| {
            let p = e.score.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if e.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / events.len() as f64
}

/// Mean clamped cross-entropy of the deduplicated predictions.
pub fn mean_bce<F: Real>(params: &ModelParams<F>, dataset: &EncodedDataset) -> Result<f64> {
    let events = score_events(params, dataset)?;
    if events.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    Ok(bce_of(&events))
}

/// Scores the dataset in inference mode and summarizes. Accuracy counts a
/// prediction as "correct" when `p >= 0.5`.
pub fn evaluate<F: Real>(params: &ModelParams<F>, dataset: &EncodedDataset) -> Result<MetricsReport> {
    report_from_scores(&score_events(params, dataset)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserAuc {
    pub user_id: u64,
    pub n_predictions: usize,
    /// `None` when the user's labels are all one class.
    pub auc: Option<f64>,
}

pub fn per_user_auc(events: &[ScoredEvent]) -> Vec<UserAuc> {
    let mut by_user: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for e in events {
        let entry = by_user.entry(e.user_id).or_default();
        entry.0.push(e.score);
        entry.1.push(e.label);
    }
    by_user
        .into_iter()
        .map(|(user_id, (s, l))| UserAuc {
            user_id,
            n_predictions: s.len(),
            auc: auc(&s, &l).ok(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_example() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[0, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 0]), Err(Error::SingleClass)));
        assert!(auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn report_fields() {
        let ev = |score, label| ScoredEvent {
            user_id: 1,
            event: 0,
            score,
            label,
        };
        let r = report_from_scores(&[ev(0.5, 1), ev(0.5, 0), ev(0.5, 1)]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.mean_bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!((r.n_predictions, r.n_positive), (3, 2));
        assert!(r.to_table().contains("n_positive"));
    }

    #[test]
    fn per_user_handles_single_class_users() {
        let events = [
            ScoredEvent { user_id: 1, event: 0, score: 0.2, label: 1 },
            ScoredEvent { user_id: 2, event: 0, score: 0.2, label: 0 },
            ScoredEvent { user_id: 2, event: 1, score: 0.7, label: 1 },
        ];
        let u = per_user_auc(&events);
        assert_eq!(u[0].auc, None);
        assert_eq!(u[1].auc, Some(1.0));
    }
}
