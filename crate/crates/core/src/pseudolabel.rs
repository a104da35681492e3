//! Confidence scores, score and oracle-WER filters, and the descending
//! threshold schedule.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, HiddenTruth, LabelSequence, Utterance, BLANK};
use crate::ctc::greedy_decode;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::utterance_wer;
use crate::model::{AcousticModel, FrameLogProbs};

pub const PSEUDOLABEL_SCHEMA: &str = "ipl.pseudolabels.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabel {
    pub id: String,
    pub hypothesis: LabelSequence,
    /// Mean per-frame max log-probability; ≤ 0.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_wer: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    /// Average only over frames whose arg-max is not blank (falls back to all
    /// frames when every frame is blank).
    pub exclude_blank: bool,
}

/// `(1/T) Σ_t max_k logp[t][k]`.
pub fn score_utterance(logp: &FrameLogProbs) -> f64 {
    score_with(logp, ScoreOptions::default())
}

pub fn score_with(logp: &FrameLogProbs, opts: ScoreOptions) -> f64 {
    let d = greedy_decode(logp);
    score_from_decode(&d.framewise_max, &d.alignment.0, opts)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn score_from_decode(framewise_max: &[f64], alignment: &[usize], opts: ScoreOptions) -> f64 {
    let all = || mean(framewise_max.iter().copied()).unwrap_or(0.0);
    if !opts.exclude_blank {
        return all();
    }
    mean(
        framewise_max
            .iter()
            .zip(alignment)
            .filter(|(_, &z)| z != BLANK)
            .map(|(&v, _)| v),
    )
    .unwrap_or_else(all)
}

/// Greedy hypothesis and confidence for each utterance, in input order.
pub fn generate_pseudolabels(
    model: &AcousticModel,
    unlabeled: &[FeatureSequence],
    opts: ScoreOptions,
) -> Result<Vec<PseudoLabel>> {
    unlabeled
        .par_iter()
        .map(|f| {
            let logp = model.forward(f)?;
            let d = greedy_decode(&logp);
            Ok(PseudoLabel {
                id: f.id.clone(),
                score: score_from_decode(&d.framewise_max, &d.alignment.0, opts),
                hypothesis: d.hypothesis,
                oracle_wer: None,
            })
        })
        .collect()
}

/// Keep exactly the items with `score > boundary`, preserving order.
pub fn score_filter(pl: &[PseudoLabel], boundary: f64) -> Vec<PseudoLabel> {
    pl.iter().filter(|p| p.score > boundary).cloned().collect()
}

/// Source of reference transcripts for oracle evaluation.
pub trait Truth {
    fn truth(&self, id: &str) -> Option<&LabelSequence>;
}

impl Truth for HiddenTruth {
    fn truth(&self, id: &str) -> Option<&LabelSequence> {
        self.reveal(id)
    }
}

impl Truth for BTreeMap<String, LabelSequence> {
    fn truth(&self, id: &str) -> Option<&LabelSequence> {
        self.get(id)
    }
}

/// Truth table for a labeled split, e.g. a threshold-estimation probe.
pub fn truth_of(split: &[Utterance]) -> BTreeMap<String, LabelSequence> {
    split
        .iter()
        .map(|u| (u.id().to_string(), u.labels.clone()))
        .collect()
}

/// Fill `oracle_wer` on every item against `truth`.
pub fn annotate_oracle_wer(pl: &mut [PseudoLabel], truth: &dyn Truth) -> Result<()> {
    for p in pl.iter_mut() {
        let r = truth
            .truth(&p.id)
            .ok_or_else(|| Error::Oracle(format!("no ground truth for `{}`", p.id)))?;
        p.oracle_wer = Some(utterance_wer(r, &p.hypothesis));
    }
    Ok(())
}

/// Oracle filter: keep items whose per-utterance WER is `< max_wer`.
/// Populates `oracle_wer` on every input as a side effect.
pub fn wer_filter(pl: &mut [PseudoLabel], truth: &dyn Truth, max_wer: f64) -> Result<Vec<PseudoLabel>> {
    annotate_oracle_wer(pl, truth)?;
    Ok(pl
        .iter()
        .filter(|p| p.oracle_wer.is_some_and(|w| w < max_wer))
        .cloned()
        .collect())
}

/// Decision boundary `initial - u·step`, lowered once every
/// `iterations_per_update` pseudo-labeling iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub initial: f64,
    pub step: f64,
    #[serde(default)]
    pub updates_so_far: usize,
    #[serde(default = "default_iterations_per_update")]
    pub iterations_per_update: usize,
}

fn default_iterations_per_update() -> usize {
    3
}

impl ThresholdSchedule {
    pub fn new(initial: f64, step: f64, iterations_per_update: usize) -> Result<Self> {
        let s = Self {
            initial,
            step,
            updates_so_far: 0,
            iterations_per_update,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule scaled to a score distribution: starts where the top 10% of
    /// `scores` would be kept and steps by a `divisions`-th of the spread
    /// between the 10% and 90% quantiles, rounded to 0.01 (at least 0.01).
    pub fn from_scores(scores: &[f64], divisions: usize, iterations_per_update: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("no scores to derive a threshold schedule from".into()));
        }
        if divisions == 0 {
            return Err(Error::Config("divisions must be >= 1".into()));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let q = |f: f64| sorted[((sorted.len() as f64 * f) as usize).min(sorted.len() - 1)];
        let spread = q(0.1) - q(0.9);
        let step = ((spread / divisions as f64 * 100.0).round() / 100.0).max(0.01);
        let initial = ((q(0.1) / step).ceil() * step * 1e9).round() / 1e9;
        Self::new(initial, step, iterations_per_update)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("threshold step must be > 0, got {}", self.step)));
        }
        if !self.initial.is_finite() {
            return Err(Error::Config("initial threshold must be finite".into()));
        }
        if self.iterations_per_update == 0 {
            return Err(Error::Config("iterations_per_update must be >= 1".into()));
        }
        Ok(())
    }

    pub fn threshold_at(&self, update: usize) -> f64 {
        self.initial - update as f64 * self.step
    }

    /// Current boundary and the schedule advanced by one update.
    pub fn next(self) -> (f64, Self) {
        let value = self.threshold_at(self.updates_so_far);
        (
            value,
            Self {
                updates_so_far: self.updates_so_far + 1,
                ..self
            },
        )
    }
}

pub fn save_pseudolabels(path: &Path, pl: &[PseudoLabel]) -> Result<()> {
    jsonl::write(path, PSEUDOLABEL_SCHEMA, pl)
}

pub fn load_pseudolabels(path: &Path) -> Result<Vec<PseudoLabel>> {
    jsonl::read(path, PSEUDOLABEL_SCHEMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn pl(id: &str, score: f64, hyp: &[usize]) -> PseudoLabel {
        PseudoLabel {
            id: id.into(),
            hypothesis: LabelSequence(hyp.to_vec()),
            score,
            oracle_wer: None,
        }
    }

    #[test]
    fn confident_rows_score_zero() {
        let mut m = Array2::from_elem((3, 3), f64::NEG_INFINITY);
        m[[0, 1]] = 0.0;
        m[[1, 0]] = 0.0;
        m[[2, 2]] = 0.0;
        assert_eq!(score_utterance(&FrameLogProbs { id: "u".into(), logp: m }), 0.0);
    }

    #[test]
    fn score_is_mean_of_frame_maxima() {
        let logp = FrameLogProbs {
            id: "u".into(),
            logp: array![[-0.1, -2.4], [-1.35, -0.3]],
        };
        assert!((score_utterance(&logp) + 0.2).abs() < 1e-15);
        let uni = FrameLogProbs::uniform("u", 5, 4);
        assert!((score_utterance(&uni) + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exclude_blank_drops_blank_frames() {
        let logp = FrameLogProbs {
            id: "u".into(),
            logp: array![[-0.1, -2.4], [-1.35, -0.3]],
        };
        let s = score_with(&logp, ScoreOptions { exclude_blank: true });
        assert_eq!(s, -0.3);
        let all_blank = FrameLogProbs {
            id: "u".into(),
            logp: array![[-0.1, -2.4], [-0.2, -1.7]],
        };
        let s = score_with(&all_blank, ScoreOptions { exclude_blank: true });
        assert!((s + 0.15).abs() < 1e-15);
    }

    #[test]
    fn score_filter_is_strict_and_order_preserving() {
        let xs = vec![pl("a", -0.02, &[1]), pl("b", -0.04, &[1]), pl("c", -0.06, &[1]), pl("d", -0.05, &[1])];
        let kept: Vec<_> = score_filter(&xs, -0.05).into_iter().map(|p| p.id).collect();
        assert_eq!(kept, vec!["a", "b"]);
        assert_eq!(score_filter(&xs, f64::NEG_INFINITY).len(), 4);
        assert!(score_filter(&xs, 0.0).is_empty());
    }

    #[test]
    fn wer_filter_fills_every_item() {
        let truth: BTreeMap<String, LabelSequence> = [
            ("a".to_string(), LabelSequence(vec![1, 2])),
            ("b".to_string(), LabelSequence(vec![1, 2])),
        ]
        .into();
        let mut xs = vec![pl("a", -0.1, &[1, 2]), pl("b", -0.1, &[2])];
        let kept = wer_filter(&mut xs, &truth, 0.1).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(xs[0].oracle_wer, Some(0.0));
        assert_eq!(xs[1].oracle_wer, Some(0.5));
        assert_eq!(wer_filter(&mut xs, &truth, f64::INFINITY).unwrap().len(), 2);

        let mut missing = vec![pl("zzz", -0.1, &[1])];
        assert!(matches!(wer_filter(&mut missing, &truth, 0.1), Err(Error::Oracle(_))));
    }

    #[test]
    fn schedule_descends_by_step() {
        let s = ThresholdSchedule::new(-0.03, 0.01, 3).unwrap();
        let (e0, s) = s.next();
        let (e1, s) = s.next();
        let (e2, _) = s.next();
        assert_eq!(e0, -0.03);
        assert!((e1 + 0.04).abs() < 1e-15);
        assert!((e2 + 0.05).abs() < 1e-15);
        assert!(ThresholdSchedule::new(-0.03, 0.0, 3).is_err());
        assert!(ThresholdSchedule::new(-0.03, -0.01, 3).is_err());
    }

    #[test]
    fn schedule_from_scores_spans_quantiles() {
        let scores: Vec<f64> = (0..100).map(|i| -0.01 * i as f64).collect();
        let s = ThresholdSchedule::from_scores(&scores, 10, 3).unwrap();
        // q10 = -0.10, q90 = -0.90.
        assert!((s.step - 0.08).abs() < 1e-12);
        assert!((s.initial + 0.08).abs() < 1e-12);
        let flat = ThresholdSchedule::from_scores(&[-0.5; 7], 10, 3).unwrap();
        assert_eq!(flat.step, 0.01);
        assert!(ThresholdSchedule::from_scores(&[], 10, 3).is_err());
    }
}
