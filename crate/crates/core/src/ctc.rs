//! CTC in log space: path-sum probability, loss and gradient via
//! forward-backward, greedy decoding, alignment collapse, and an exhaustive
//! enumeration oracle.
//!
//! Class 0 is the blank throughout.

use ndarray::Array2;

use crate::corpus::{LabelSequence, BLANK};
use crate::error::{Error, Result};
use crate::model::FrameLogProbs;

/// Upper bound on alignments the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Stable `ln(e^a + e^b)`; `-inf` is absorbing on both sides.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Stable `ln Σ e^x`. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// One class per frame, blank included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment(pub Vec<usize>);

/// Merge consecutive repeats, then drop blanks.
pub fn collapse(alignment: &[usize]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &z in alignment {
        if Some(z) != prev && z != BLANK {
            out.push(z);
        }
        prev = Some(z);
    }
    LabelSequence(out)
}

/// Minimum frames needed to emit `labels`: one per label plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + adjacent_repeats(labels)
}

fn adjacent_repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug)]
pub struct CtcResult {
    /// `ln P(labels | frames)`.
    pub log_prob: f64,
    /// `∂(-ln P)/∂logits`, where the input rows are `log_softmax(logits)`.
    pub grad: Option<Array2<f64>>,
}

impl CtcResult {
    pub fn loss(&self) -> f64 {
        -self.log_prob
    }
}

fn check_labels(logp: &FrameLogProbs, labels: &[usize]) -> Result<()> {
    let classes = logp.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::Shape(format!(
            "label index {bad} invalid for {classes} output classes (blank = 0)"
        )));
    }
    let t = logp.num_frames();
    if t < min_frames(labels) {
        return Err(Error::Infeasible {
            utterance: Some(logp.id.clone()).filter(|s| !s.is_empty()),
            frames: t,
            labels: labels.len(),
            repeats: adjacent_repeats(labels),
        });
    }
    Ok(())
}

/// Blank-interleaved label sequence: `_ l1 _ l2 _ ... lL _`.
fn extend(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

#[inline]
fn can_skip(ext: &[usize], s: usize) -> bool {
    // Entering state s from s-2 skips a blank; only legal between distinct labels.
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn forward(lp: &Array2<f64>, ext: &[usize]) -> Array2<f64> {
    let (t_len, s_len) = (lp.nrows(), ext.len());
    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[[t, ext[s]]]
            };
        }
    }
    alpha
}

fn backward(lp: &Array2<f64>, ext: &[usize]) -> Array2<f64> {
    let (t_len, s_len) = (lp.nrows(), ext.len());
    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    let last = t_len - 1;
    beta[[last, s_len - 1]] = lp[[last, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[last, s_len - 2]] = lp[[last, ext[s_len - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[[t, ext[s]]]
            };
        }
    }
    beta
}

/// `ln P(labels | frames)` by the forward recursion, optionally with the
/// gradient of `-ln P` with respect to the pre-softmax logits.
///
/// Fails with [`Error::Infeasible`] when `T < L + repeats`.
pub fn ctc_log_prob(logp: &FrameLogProbs, labels: &LabelSequence, with_grad: bool) -> Result<CtcResult> {
    let labels = labels.as_slice();
    check_labels(logp, labels)?;
    let lp = &logp.logp;
    let ext = extend(labels);
    let s_len = ext.len();
    let alpha = forward(lp, &ext);
    let last = lp.nrows() - 1;
    let log_prob = if s_len > 1 {
        log_add(alpha[[last, s_len - 1]], alpha[[last, s_len - 2]])
    } else {
        alpha[[last, 0]]
    };
    if !with_grad {
        return Ok(CtcResult { log_prob, grad: None });
    }

    let beta = backward(lp, &ext);
    let mut grad = lp.mapv(f64::exp);
    if log_prob.is_finite() {
        for t in 0..lp.nrows() {
            for (s, &k) in ext.iter().enumerate() {
                let ab = alpha[[t, s]] + beta[[t, s]];
                if ab != f64::NEG_INFINITY {
                    // α and β both include the emission at t; remove one copy.
                    grad[[t, k]] -= (ab - lp[[t, k]] - log_prob).exp();
                }
            }
        }
    }
    Ok(CtcResult {
        log_prob,
        grad: Some(grad),
    })
}

/// `Σ_i -ln P(y_i | x_i)` over a batch.
pub fn ctc_loss_batch(outputs: &[FrameLogProbs], labels: &[LabelSequence]) -> Result<f64> {
    if outputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} model outputs but {} label sequences",
            outputs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (o, l)) in outputs.iter().zip(labels).enumerate() {
        let r = ctc_log_prob(o, l, false).map_err(|e| match e {
            Error::Infeasible {
                utterance: None,
                frames,
                labels,
                repeats,
            } => Error::Infeasible {
                utterance: Some(format!("#{i}")),
                frames,
                labels,
                repeats,
            },
            other => other,
        })?;
        total += r.loss();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyDecode {
    pub hypothesis: LabelSequence,
    pub alignment: Alignment,
    /// Max log-probability at each frame.
    pub framewise_max: Vec<f64>,
}

/// Best-path decoding: per-frame arg-max (lowest index wins ties), then collapse.
pub fn greedy_decode(logp: &FrameLogProbs) -> GreedyDecode {
    let mut alignment = Vec::with_capacity(logp.num_frames());
    let mut framewise_max = Vec::with_capacity(logp.num_frames());
    for row in logp.logp.rows() {
        let mut best = 0;
        let mut best_v = row[0];
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        alignment.push(best);
        framewise_max.push(best_v);
    }
    GreedyDecode {
        hypothesis: collapse(&alignment),
        alignment: Alignment(alignment),
        framewise_max,
    }
}

/// Exhaustive `ln Σ_{z : collapse(z) = labels} Π_t p(z_t)`.
///
/// Total: infeasible labels give `-inf`. Refuses instances with more than
/// [`BRUTE_FORCE_LIMIT`] alignments.
pub fn brute_force_ctc(logp: &FrameLogProbs, labels: &LabelSequence) -> Result<f64> {
    let (t_len, k) = (logp.num_frames(), logp.num_classes());
    let total = (k as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(total));
    }
    let mut z = vec![0usize; t_len];
    let mut terms = Vec::new();
    for _ in 0..total {
        if collapse(&z) == *labels {
            terms.push((0..t_len).map(|t| logp.logp[[t, z[t]]]).sum::<f64>());
        }
        // Odometer increment.
        for digit in z.iter_mut().rev() {
            *digit += 1;
            if *digit < k {
                break;
            }
            *digit = 0;
        }
    }
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn flp(rows: Array2<f64>) -> FrameLogProbs {
        FrameLogProbs::from_probs("u", rows)
    }

    #[test]
    fn collapse_merges_then_drops_blanks() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2]).0, vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0]).0, Vec::<usize>::new());
        assert_eq!(collapse(&[]).0, Vec::<usize>::new());
        assert_eq!(collapse(&[2, 1, 2]).0, vec![2, 1, 2]);
    }

    #[test]
    fn single_frame_single_label() {
        let lp = flp(array![[0.2, 0.7, 0.1]]);
        let r = ctc_log_prob(&lp, &LabelSequence(vec![1]), false).unwrap();
        assert!((r.log_prob - 0.7f64.ln()).abs() < 1e-12);
        assert!((brute_force_ctc(&lp, &LabelSequence(vec![1])).unwrap() - r.log_prob).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_the_all_blank_path() {
        let lp = flp(array![[0.5, 0.25, 0.25], [0.1, 0.6, 0.3]]);
        let r = ctc_log_prob(&lp, &LabelSequence::default(), true).unwrap();
        assert!((r.log_prob - (0.5f64.ln() + 0.1f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn infeasible_pairs_error_but_oracle_returns_neg_inf() {
        let lp = flp(array![[0.5, 0.25, 0.25], [0.1, 0.6, 0.3]]);
        let rep = LabelSequence(vec![1, 1]);
        assert!(matches!(
            ctc_log_prob(&lp, &rep, false),
            Err(Error::Infeasible { frames: 2, labels: 2, repeats: 1, .. })
        ));
        assert_eq!(brute_force_ctc(&lp, &rep).unwrap(), f64::NEG_INFINITY);
        // Without the repeat two frames suffice.
        assert!(ctc_log_prob(&lp, &LabelSequence(vec![1, 2]), false).is_ok());
    }

    #[test]
    fn blank_or_out_of_range_labels_are_shape_errors() {
        let lp = flp(array![[0.5, 0.5]]);
        assert!(matches!(ctc_log_prob(&lp, &LabelSequence(vec![0]), false), Err(Error::Shape(_))));
        assert!(matches!(ctc_log_prob(&lp, &LabelSequence(vec![2]), false), Err(Error::Shape(_))));
    }

    #[test]
    fn brute_force_guard() {
        let lp = FrameLogProbs::uniform("u", 20, 3);
        assert!(matches!(brute_force_ctc(&lp, &LabelSequence(vec![1])), Err(Error::TooLarge(_))));
    }

    #[test]
    fn batch_loss_is_additive() {
        let a = flp(array![[0.2, 0.7, 0.1], [0.3, 0.3, 0.4]]);
        let b = flp(array![[0.6, 0.2, 0.2]]);
        let la = LabelSequence(vec![2]);
        let lb = LabelSequence(vec![1]);
        assert_eq!(ctc_loss_batch(&[], &[]).unwrap(), 0.0);
        let one = ctc_loss_batch(std::slice::from_ref(&a), std::slice::from_ref(&la)).unwrap();
        assert!((one + ctc_log_prob(&a, &la, false).unwrap().log_prob).abs() < 1e-12);
        let two = ctc_loss_batch(&[a.clone(), b.clone()], &[la.clone(), lb.clone()]).unwrap();
        let sep = ctc_loss_batch(&[b], &[lb]).unwrap() + one;
        assert!((two - sep).abs() < 1e-12);
        assert!(two >= 0.0);
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let lp = flp(array![[0.4, 0.4, 0.2], [0.2, 0.4, 0.4]]);
        let d = greedy_decode(&lp);
        assert_eq!(d.alignment.0, vec![0, 1]);
        assert_eq!(d.hypothesis.0, vec![1]);
    }

    #[test]
    fn greedy_on_blank_one_hot_rows() {
        let mut m = Array2::from_elem((3, 4), f64::NEG_INFINITY);
        m.column_mut(0).fill(0.0);
        let d = greedy_decode(&FrameLogProbs { id: "u".into(), logp: m });
        assert!(d.hypothesis.is_empty());
        assert_eq!(d.framewise_max, vec![0.0; 3]);
    }

    #[test]
    fn greedy_collapses_argmax_path() {
        // argmax path [a, a, blank, b]
        let lp = flp(array![
            [0.1, 0.8, 0.1],
            [0.1, 0.8, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8]
        ]);
        assert_eq!(greedy_decode(&lp).hypothesis.0, vec![1, 2]);
    }

    #[test]
    fn log_add_handles_infinities() {
        assert_eq!(log_add(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(log_add(f64::NEG_INFINITY, -1.5), -1.5);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
