//! The iterative pseudo-labeling loop, the descending threshold sweep with its
//! stopping rule, and probe-based threshold estimation.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, FeatureSequence, LabelSequence, Utterance};
use crate::ctc::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{self, Histogram};
use crate::model::{self, AcousticModel, TrainConfig, TrainExample};
use crate::pseudolabel::{self, PseudoLabel, ScoreOptions, ThresholdSchedule, Truth};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterMode {
    None,
    /// Fixed decision boundary: keep `score > boundary`.
    Score { boundary: f64 },
    /// Boundary lowered by `step` every `iterations_per_update` iterations.
    Schedule { schedule: ThresholdSchedule },
    /// Oracle filter: keep per-utterance WER `< max_wer`.
    OracleWer { max_wer: f64 },
}

impl FilterMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            FilterMode::None => Ok(()),
            FilterMode::Score { boundary } if boundary.is_nan() => {
                Err(Error::Config("score boundary is NaN".into()))
            }
            FilterMode::Score { .. } => Ok(()),
            FilterMode::Schedule { schedule } => schedule.validate(),
            FilterMode::OracleWer { max_wer } if max_wer.is_nan() || *max_wer <= 0.0 => {
                Err(Error::Config(format!("max_wer must be > 0, got {max_wer}")))
            }
            FilterMode::OracleWer { .. } => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FilterMode::None => "none",
            FilterMode::Score { .. } => "score",
            FilterMode::Schedule { .. } => "schedule",
            FilterMode::OracleWer { .. } => "oracle_wer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IplConfig {
    /// Pseudo-labeling iterations.
    pub iter_max: usize,
    pub filter: FilterMode,
    /// Per-iteration training; `epochs_per_iter` is the epoch budget per iteration.
    pub train: TrainConfig,
    pub teacher_epochs: usize,
    /// 0 = linear per-frame model.
    pub hidden_dim: usize,
    /// Master seed for model init and every shuffle.
    pub seed: u64,
    /// Weight of a pseudo-labeled utterance relative to a labeled one.
    pub pseudo_weight: f64,
    /// Continue from the previous iteration's weights (otherwise restart from the teacher).
    pub warm_start: bool,
    /// Keep the epoch with the lowest dev WER rather than the last one.
    pub select_best_epoch: bool,
    pub score: ScoreOptions,
}

impl Default for IplConfig {
    fn default() -> Self {
        Self {
            iter_max: 3,
            filter: FilterMode::None,
            train: TrainConfig::default(),
            teacher_epochs: 100,
            hidden_dim: 0,
            seed: 0,
            pseudo_weight: 1.0,
            warm_start: true,
            select_best_epoch: true,
            score: ScoreOptions::default(),
        }
    }
}

impl IplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iter_max == 0 {
            return Err(Error::Config("iter_max must be >= 1".into()));
        }
        if !(self.pseudo_weight >= 0.0 && self.pseudo_weight.is_finite()) {
            return Err(Error::Config("pseudo_weight must be finite and non-negative".into()));
        }
        self.filter.validate()?;
        self.train.validate()
    }

    fn stage_config(&self, stage: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs_per_iter: epochs,
            seed: self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(stage),
            ..self.train.clone()
        }
    }
}

/// Pooled WER of greedy decodes over a labeled split.
pub fn evaluate(model: &AcousticModel, split: &[Utterance]) -> Result<f64> {
    let hyps = decode_all(model, split.iter().map(|u| &u.features))?;
    metrics::wer(split.iter().map(|u| &u.labels).zip(hyps.iter()))
}

fn decode_all<'a>(
    model: &AcousticModel,
    features: impl Iterator<Item = &'a FeatureSequence>,
) -> Result<Vec<LabelSequence>> {
    use rayon::prelude::*;
    let features: Vec<_> = features.collect();
    features
        .par_iter()
        .map(|f| Ok(greedy_decode(&model.forward(f)?).hypothesis))
        .collect()
}

/// Train, optionally keeping the epoch with the best dev WER (earliest on ties).
fn fit(
    start: &AcousticModel,
    examples: &[TrainExample<'_>],
    train_cfg: &TrainConfig,
    dev: &[Utterance],
    select_best: bool,
) -> Result<(AcousticModel, Vec<f64>)> {
    if !select_best || dev.is_empty() {
        let out = model::train(start, examples, train_cfg)?;
        return Ok((out.model, out.loss_curve));
    }
    let mut best: Option<(f64, AcousticModel)> = None;
    let out = model::train_observed(start, examples, train_cfg, &mut |_, m| {
        let w = evaluate(m, dev)?;
        if best.as_ref().is_none_or(|(b, _)| w < *b) {
            best = Some((w, m.clone()));
        }
        Ok(())
    })?;
    let chosen = best.map(|(_, m)| m).unwrap_or(out.model);
    Ok((chosen, out.loss_curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub loss_curve: Vec<f64>,
    pub dev_wer: f64,
    pub test_wer: f64,
}

/// Trains the initial model on the labeled split only.
pub fn train_teacher(corpus: &CorpusSplits, cfg: &IplConfig) -> Result<(AcousticModel, TeacherReport)> {
    cfg.validate()?;
    if corpus.labeled.is_empty() {
        return Err(Error::Config("labeled split is empty".into()));
    }
    let init = model::init_model(corpus.feature_dim(), corpus.vocab.len(), cfg.hidden_dim, cfg.seed)?;
    let (teacher, loss_curve) = fit(
        &init,
        &model::examples_from(&corpus.labeled),
        &cfg.stage_config(0, cfg.teacher_epochs),
        &corpus.dev,
        cfg.select_best_epoch,
    )?;
    let report = TeacherReport {
        loss_curve,
        dev_wer: evaluate(&teacher, &corpus.dev)?,
        test_wer: evaluate(&teacher, &corpus.test)?,
    };
    Ok((teacher, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// 1-based.
    pub iteration: usize,
    pub filter: String,
    pub threshold: Option<f64>,
    pub generated: usize,
    pub kept: usize,
    pub rejected: usize,
    /// Nothing survived the filter; the iteration trained on labeled data alone.
    pub empty_kept: bool,
    pub fused_size: usize,
    pub mean_kept_score: Option<f64>,
    /// Mean per-utterance oracle WER of the kept / rejected pseudo-labels.
    pub oracle_wer_kept: Option<f64>,
    pub oracle_wer_rejected: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub dev_wer: f64,
    pub test_wer: f64,
    /// Excluded from records so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_ms: u128,
}

/// Everything produced by one iteration, handed to observers before the next starts.
pub struct IterationArtifacts<'a> {
    pub report: &'a IterationReport,
    pub model: &'a AcousticModel,
    /// All generated pseudo-labels, with `oracle_wer` filled when truth is available.
    pub pseudolabels: &'a [PseudoLabel],
}

#[derive(Clone, Debug)]
pub struct IplRun {
    pub model: AcousticModel,
    pub teacher: AcousticModel,
    pub teacher_report: Option<TeacherReport>,
    pub reports: Vec<IterationReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Threshold in force at 1-based iteration `t`.
fn threshold_for(filter: &FilterMode, t: usize) -> Option<f64> {
    match filter {
        FilterMode::Score { boundary } => Some(*boundary),
        FilterMode::Schedule { schedule } => Some(
            schedule.threshold_at(schedule.updates_so_far + (t - 1) / schedule.iterations_per_update),
        ),
        FilterMode::None | FilterMode::OracleWer { .. } => None,
    }
}

struct IterationInput<'a> {
    corpus: &'a CorpusSplits,
    cfg: &'a IplConfig,
    unlabeled_index: &'a HashMap<&'a str, usize>,
    teacher: &'a AcousticModel,
}

fn run_iteration(
    input: &IterationInput<'_>,
    prev: &AcousticModel,
    t: usize,
    filter: &FilterMode,
) -> Result<(AcousticModel, IterationReport, Vec<PseudoLabel>)> {
    let started = Instant::now();
    let IterationInput {
        corpus,
        cfg,
        unlabeled_index,
        teacher,
    } = *input;
    let mut pl = pseudolabel::generate_pseudolabels(prev, &corpus.unlabeled, cfg.score)?;
    let threshold = threshold_for(filter, t);
    let kept = match filter {
        FilterMode::None => pl.clone(),
        FilterMode::Score { .. } | FilterMode::Schedule { .. } => {
            pseudolabel::score_filter(&pl, threshold.expect("score modes carry a threshold"))
        }
        FilterMode::OracleWer { max_wer } => pseudolabel::wer_filter(&mut pl, &corpus.unlabeled_truth, *max_wer)?,
    };
    // Oracle statistics for the report only; training below never reads them.
    let truth_available = !corpus.unlabeled_truth.is_empty();
    if truth_available && pl.iter().any(|p| p.oracle_wer.is_none()) {
        pseudolabel::annotate_oracle_wer(&mut pl, &corpus.unlabeled_truth)?;
    }

    let kept_ids: BTreeSet<&str> = kept.iter().map(|p| p.id.as_str()).collect();
    let mut examples = model::examples_from(&corpus.labeled);
    for p in &kept {
        let idx = unlabeled_index[p.id.as_str()];
        examples.push(TrainExample {
            features: &corpus.unlabeled[idx],
            labels: &p.hypothesis,
            weight: cfg.pseudo_weight,
        });
    }
    let start = if cfg.warm_start { prev } else { teacher };
    let (trained, loss_curve) = fit(
        start,
        &examples,
        &cfg.stage_config(t as u64, cfg.train.epochs_per_iter),
        &corpus.dev,
        cfg.select_best_epoch,
    )?;

    let oracle_mean = |keep: bool| {
        truth_available
            .then(|| {
                mean(
                    pl.iter()
                        .filter(|p| kept_ids.contains(p.id.as_str()) == keep)
                        .filter_map(|p| p.oracle_wer),
                )
            })
            .flatten()
    };
    let report = IterationReport {
        iteration: t,
        filter: filter.label().to_string(),
        threshold,
        generated: pl.len(),
        kept: kept.len(),
        rejected: pl.len() - kept.len(),
        empty_kept: kept.is_empty(),
        fused_size: examples.len(),
        mean_kept_score: mean(kept.iter().map(|p| p.score)),
        oracle_wer_kept: oracle_mean(true),
        oracle_wer_rejected: oracle_mean(false),
        final_train_loss: loss_curve.last().copied(),
        dev_wer: evaluate(&trained, &corpus.dev)?,
        test_wer: evaluate(&trained, &corpus.test)?,
        wall_clock_ms: started.elapsed().as_millis(),
    };
    Ok((trained, report, pl))
}

/// Runs the loop for `cfg.iter_max` iterations. Trains a teacher first unless
/// one is supplied. `observer` sees every iteration's artifacts.
pub fn run_ipl_with(
    corpus: &CorpusSplits,
    cfg: &IplConfig,
    teacher: Option<&AcousticModel>,
    observer: &mut dyn FnMut(&IterationArtifacts<'_>) -> Result<()>,
) -> Result<IplRun> {
    cfg.validate()?;
    let (teacher, teacher_report) = match teacher {
        Some(m) => (m.clone(), None),
        None => {
            let (m, r) = train_teacher(corpus, cfg)?;
            (m, Some(r))
        }
    };
    let unlabeled_index: HashMap<&str, usize> = corpus
        .unlabeled
        .iter()
        .enumerate()
        .map(|(i, f)| (f.id.as_str(), i))
        .collect();
    let input = IterationInput {
        corpus,
        cfg,
        unlabeled_index: &unlabeled_index,
        teacher: &teacher,
    };
    let mut model = teacher.clone();
    let mut reports = Vec::with_capacity(cfg.iter_max);
    for t in 1..=cfg.iter_max {
        let (next, report, pl) = run_iteration(&input, &model, t, &cfg.filter)?;
        observer(&IterationArtifacts {
            report: &report,
            model: &next,
            pseudolabels: &pl,
        })?;
        reports.push(report);
        model = next;
    }
    Ok(IplRun {
        model,
        teacher,
        teacher_report,
        reports,
    })
}

pub fn run_ipl(corpus: &CorpusSplits, cfg: &IplConfig, teacher: Option<&AcousticModel>) -> Result<IplRun> {
    run_ipl_with(corpus, cfg, teacher, &mut |_| Ok(()))
}

/// Outcome of the stopping rule over a sequence of (threshold, dev WER) points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub index: usize,
    pub threshold: f64,
    /// False when the sequence ran out without any decline.
    pub declined: bool,
}

/// Walk thresholds in order and stop at the first whose dev WER is worse than
/// its predecessor's; the predecessor is selected. Without a decline the last
/// threshold is selected and `declined` is false.
pub fn select_threshold(points: &[(f64, f64)]) -> Option<ThresholdSelection> {
    let first = points.first()?;
    for (i, w) in points.windows(2).enumerate() {
        if w[1].1 > w[0].1 {
            return Some(ThresholdSelection {
                index: i,
                threshold: w[0].0,
                declined: true,
            });
        }
    }
    let last = points.len() - 1;
    Some(ThresholdSelection {
        index: last,
        threshold: points.last().unwrap_or(first).0,
        declined: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Upper bound on thresholds tried before giving up on finding a decline.
    pub max_thresholds: usize,
    /// Restart each threshold from the teacher instead of continuing training.
    pub restart_per_threshold: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            max_thresholds: 12,
            restart_per_threshold: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    /// Best dev WER over the iterations run at this threshold.
    pub best_dev_wer: f64,
    pub best_iteration: usize,
    pub test_wer_at_best: f64,
    pub mean_kept: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub best_threshold: f64,
    pub selection: ThresholdSelection,
    pub points: Vec<ThresholdPoint>,
    pub reports: Vec<IterationReport>,
    /// The schedule ran out without a decline.
    pub exhausted_without_decline: bool,
    pub teacher: AcousticModel,
    pub teacher_report: Option<TeacherReport>,
}

/// Lowers the boundary along `schedule`, running
/// `schedule.iterations_per_update` iterations at each value, and stops at the
/// first threshold whose best dev WER is worse than the previous one's.
pub fn sweep_threshold_with(
    corpus: &CorpusSplits,
    cfg: &IplConfig,
    schedule: &ThresholdSchedule,
    sweep: &SweepConfig,
    teacher: Option<&AcousticModel>,
    observer: &mut dyn FnMut(&IterationArtifacts<'_>) -> Result<()>,
) -> Result<SweepOutcome> {
    cfg.validate()?;
    schedule.validate()?;
    if corpus.dev.is_empty() {
        return Err(Error::Config("threshold sweep needs a non-empty dev split".into()));
    }
    if sweep.max_thresholds == 0 {
        return Err(Error::Config("max_thresholds must be >= 1".into()));
    }
    let (teacher, teacher_report) = match teacher {
        Some(m) => (m.clone(), None),
        None => {
            let (m, r) = train_teacher(corpus, cfg)?;
            (m, Some(r))
        }
    };
    let unlabeled_index: HashMap<&str, usize> = corpus
        .unlabeled
        .iter()
        .enumerate()
        .map(|(i, f)| (f.id.as_str(), i))
        .collect();
    let input = IterationInput {
        corpus,
        cfg,
        unlabeled_index: &unlabeled_index,
        teacher: &teacher,
    };

    let per = schedule.iterations_per_update;
    let mut model = teacher.clone();
    let mut points: Vec<ThresholdPoint> = Vec::new();
    let mut reports = Vec::new();
    let mut t = 0;
    let mut sched = *schedule;
    for _ in 0..sweep.max_thresholds {
        let (boundary, advanced) = sched.next();
        sched = advanced;
        if sweep.restart_per_threshold {
            model = teacher.clone();
        }
        let filter = FilterMode::Score { boundary };
        let mut best: Option<ThresholdPoint> = None;
        let mut kept_total = 0;
        for _ in 0..per {
            t += 1;
            let (next, report, pl) = run_iteration(&input, &model, t, &filter)?;
            observer(&IterationArtifacts {
                report: &report,
                model: &next,
                pseudolabels: &pl,
            })?;
            kept_total += report.kept;
            if best.as_ref().is_none_or(|b| report.dev_wer < b.best_dev_wer) {
                best = Some(ThresholdPoint {
                    threshold: boundary,
                    best_dev_wer: report.dev_wer,
                    best_iteration: report.iteration,
                    test_wer_at_best: report.test_wer,
                    mean_kept: 0.0,
                });
            }
            reports.push(report);
            model = next;
        }
        let mut point = best.expect("iterations_per_update >= 1");
        point.mean_kept = kept_total as f64 / per as f64;
        let declined = points.last().is_some_and(|p| point.best_dev_wer > p.best_dev_wer);
        points.push(point);
        if declined {
            break;
        }
    }
    let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.threshold, p.best_dev_wer)).collect();
    let selection = select_threshold(&curve).expect("at least one threshold evaluated");
    Ok(SweepOutcome {
        best_threshold: selection.threshold,
        selection,
        exhausted_without_decline: !selection.declined,
        points,
        reports,
        teacher,
        teacher_report,
    })
}

pub fn sweep_threshold(
    corpus: &CorpusSplits,
    cfg: &IplConfig,
    schedule: &ThresholdSchedule,
    sweep: &SweepConfig,
) -> Result<SweepOutcome> {
    sweep_threshold_with(corpus, cfg, schedule, sweep, None, &mut |_| Ok(()))
}

/// Sweep schedule scaled to the teacher's scores on the unlabeled split; see
/// [`ThresholdSchedule::from_scores`].
pub fn schedule_from_teacher(
    teacher: &AcousticModel,
    corpus: &CorpusSplits,
    score: ScoreOptions,
    divisions: usize,
    iterations_per_update: usize,
) -> Result<ThresholdSchedule> {
    let pl = pseudolabel::generate_pseudolabels(teacher, &corpus.unlabeled, score)?;
    let scores: Vec<f64> = pl.iter().map(|p| p.score).collect();
    ThresholdSchedule::from_scores(&scores, divisions, iterations_per_update)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    /// Per-utterance WER cutoff of the oracle filter.
    pub max_wer: f64,
    /// Minimum fraction of the score-selected set that the WER-selected set must cover.
    pub coverage: f64,
    pub min_probe: usize,
    pub n_bins: usize,
    pub score: ScoreOptions,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            max_wer: 0.10,
            coverage: 0.9,
            min_probe: 20,
            n_bins: 20,
            score: ScoreOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWerPair {
    pub id: String,
    pub score: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Score of the least confident utterance in the selected set; the set is
    /// every probe utterance scoring at least this much.
    pub threshold: f64,
    /// False when no prefix of the score ranking met the criteria; the
    /// threshold is then the top score.
    pub feasible: bool,
    pub probe_size: usize,
    pub wer_kept: usize,
    pub score_kept: usize,
    pub intersection: usize,
    pub jaccard: f64,
    pub min_ratio: f64,
    /// Expected Jaccard of a uniformly random subset the size of the score-selected set.
    pub random_jaccard: f64,
    pub score_histogram: Histogram,
    pub wer_histogram: Histogram,
    pub pairs: Vec<ScoreWerPair>,
}

/// Decodes the probe, applies the oracle WER filter, and lowers the score
/// boundary through the ranked scores for as long as the score-selected set
/// stays no larger than the WER-selected set and at least `coverage` of it is
/// also WER-selected. Returns the score at the lowest admissible boundary.
pub fn estimate_threshold(
    model: &AcousticModel,
    probe: &[Utterance],
    cfg: &EstimateConfig,
) -> Result<(f64, EstimateReport)> {
    if probe.len() < cfg.min_probe.max(1) {
        return Err(Error::InsufficientProbe {
            got: probe.len(),
            need: cfg.min_probe.max(1),
        });
    }
    if !(0.0..=1.0).contains(&cfg.coverage) {
        return Err(Error::Config("coverage must lie in [0, 1]".into()));
    }
    let features: Vec<FeatureSequence> = probe.iter().map(|u| u.features.clone()).collect();
    let mut pl = pseudolabel::generate_pseudolabels(model, &features, cfg.score)?;
    let truth = pseudolabel::truth_of(probe);
    let wer_kept: BTreeSet<String> = pseudolabel::wer_filter(&mut pl, &truth as &dyn Truth, cfg.max_wer)?
        .into_iter()
        .map(|p| p.id)
        .collect();

    let mut ranked: Vec<&PseudoLabel> = pl.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let n = ranked.len();
    let mut best_k = None;
    let mut inter = 0;
    for k in 1..=n {
        if wer_kept.contains(&ranked[k - 1].id) {
            inter += 1;
        }
        // Only cut where the boundary separates distinct scores.
        if k < n && ranked[k].score == ranked[k - 1].score {
            continue;
        }
        if k <= wer_kept.len() && inter as f64 >= cfg.coverage * k as f64 {
            best_k = Some(k);
        }
    }
    let (threshold, feasible, k) = match best_k {
        Some(k) => (ranked[k - 1].score, true, k),
        None => (ranked[0].score, false, 0),
    };
    let score_kept: BTreeSet<String> = ranked[..k].iter().map(|p| p.id.clone()).collect();
    let intersection = score_kept.intersection(&wer_kept).count();

    let scores: Vec<f64> = pl.iter().map(|p| p.score).collect();
    let wers: Vec<f64> = pl
        .iter()
        .filter_map(|p| p.oracle_wer)
        .filter(|w| w.is_finite())
        .collect();
    let report = EstimateReport {
        threshold,
        feasible,
        probe_size: n,
        wer_kept: wer_kept.len(),
        score_kept: score_kept.len(),
        intersection,
        jaccard: metrics::overlap_rate(&score_kept, &wer_kept),
        min_ratio: metrics::overlap_min_ratio(&score_kept, &wer_kept),
        random_jaccard: metrics::random_subset_jaccard(n, score_kept.len(), wer_kept.len()),
        score_histogram: metrics::histogram(&scores, cfg.n_bins)?,
        wer_histogram: metrics::histogram(&wers, cfg.n_bins)?,
        pairs: pl
            .iter()
            .map(|p| ScoreWerPair {
                id: p.id.clone(),
                score: p.score,
                wer: p.oracle_wer.unwrap_or(f64::NAN),
            })
            .collect(),
    };
    Ok((threshold, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_sequence_selects_minus_005() {
        let pts = [(-0.03, 7.87), (-0.04, 7.63), (-0.05, 7.47), (-0.06, 7.60)];
        let s = select_threshold(&pts).unwrap();
        assert_eq!(s.threshold, -0.05);
        assert!(s.declined);
    }

    #[test]
    fn monotone_improvement_returns_last_without_decline() {
        let s = select_threshold(&[(-0.1, 9.0), (-0.2, 8.0), (-0.3, 7.0)]).unwrap();
        assert_eq!(s.threshold, -0.3);
        assert!(!s.declined);
    }

    #[test]
    fn immediate_decline_returns_initial() {
        let s = select_threshold(&[(-0.1, 7.0), (-0.2, 8.0), (-0.3, 6.0)]).unwrap();
        assert_eq!(s.threshold, -0.1);
        assert_eq!(s.index, 0);
    }

    #[test]
    fn ties_are_not_declines() {
        let s = select_threshold(&[(-0.1, 7.0), (-0.2, 7.0), (-0.3, 7.5)]).unwrap();
        assert_eq!(s.threshold, -0.2);
        assert!(select_threshold(&[]).is_none());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = IplConfig {
            iter_max: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
