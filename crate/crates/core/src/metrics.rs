//! Edit-distance WER, set overlap and histogram summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSequence;
use crate::error::{Error, Result};

/// Substitutions, deletions, insertions and hits of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub h: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.s + self.d + self.i
    }

    /// Reference length N = S + D + H.
    pub fn ref_len(&self) -> usize {
        self.s + self.d + self.h
    }

    pub fn hyp_len(&self) -> usize {
        self.s + self.i + self.h
    }

    /// Per-utterance error rate. An empty reference gives 0 for an empty
    /// hypothesis and +inf otherwise.
    pub fn rate(&self) -> f64 {
        match (self.errors(), self.ref_len()) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

impl std::ops::Add for EditCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            s: self.s + o.s,
            d: self.d + o.d,
            i: self.i + o.i,
            h: self.h + o.h,
        }
    }
}

/// Minimum unit-cost alignment. Backtrace prefers hit, then substitution,
/// then deletion, then insertion.
pub fn edit_counts(reference: &LabelSequence, hypothesis: &LabelSequence) -> EditCounts {
    let (r, h) = (reference.as_slice(), hypothesis.as_slice());
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for (j, cell) in dp.iter_mut().enumerate().take(w) {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = dp[i * w + j];
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && dp[(i - 1) * w + j - 1] == cur {
            c.h += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dp[(i - 1) * w + j - 1] + 1 == cur {
            c.s += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[(i - 1) * w + j] + 1 == cur {
            c.d += 1;
            i -= 1;
        } else {
            c.i += 1;
            j -= 1;
        }
    }
    c
}

pub fn utterance_wer(reference: &LabelSequence, hypothesis: &LabelSequence) -> f64 {
    edit_counts(reference, hypothesis).rate()
}

/// Pooled corpus WER: Σ(S+D+I) / ΣN.
pub fn wer<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a LabelSequence, &'a LabelSequence)>,
{
    let total = pairs
        .into_iter()
        .map(|(r, h)| edit_counts(r, h))
        .fold(EditCounts::default(), |a, b| a + b);
    if total.ref_len() == 0 {
        return Err(Error::UndefinedMetric("WER with zero reference tokens".into()));
    }
    Ok(total.errors() as f64 / total.ref_len() as f64)
}

/// Jaccard `|A∩B| / |A∪B|`; 1 when both sets are empty.
pub fn overlap_rate<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|A∩B| / min(|A|, |B|)`; 1 when either set is empty.
pub fn overlap_min_ratio<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let small = a.len().min(b.len());
    if small == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / small as f64
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Expected Jaccard between a fixed `m`-subset and a uniformly random
/// `k`-subset of an `n`-element universe (exact, hypergeometric).
pub fn random_subset_jaccard(n: usize, k: usize, m: usize) -> f64 {
    assert!(k <= n && m <= n, "subset sizes exceed universe");
    if k == 0 && m == 0 {
        return 1.0;
    }
    let denom = ln_choose(n, k);
    let lo = (k + m).saturating_sub(n);
    (lo..=k.min(m))
        .map(|i| {
            let p = (ln_choose(m, i) + ln_choose(n - m, k - i) - denom).exp();
            p * i as f64 / (k + m - i) as f64
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[min, max]`; the max lands in the last bin. A
/// constant sample yields a single degenerate bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram of no values".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("histogram values must be finite".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(Histogram {
            bin_edges: vec![min, max],
            counts: vec![values.len()],
        });
    }
    let width = (max - min) / n_bins as f64;
    let mut bin_edges: Vec<f64> = (0..n_bins).map(|b| min + b as f64 * width).collect();
    bin_edges.push(max);
    let mut counts = vec![0; n_bins];
    for &v in values {
        let b = (((v - min) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { bin_edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(v: &[usize]) -> LabelSequence {
        LabelSequence(v.to_vec())
    }

    #[test]
    fn identity_is_all_hits() {
        assert_eq!(
            edit_counts(&l(&[1, 2, 3]), &l(&[1, 2, 3])),
            EditCounts { s: 0, d: 0, i: 0, h: 3 }
        );
    }

    #[test]
    fn hand_traced_substitution_and_insertion() {
        // ref a b c, hyp a x c d
        let c = edit_counts(&l(&[1, 2, 3]), &l(&[1, 9, 3, 4]));
        assert_eq!(c, EditCounts { s: 1, d: 0, i: 1, h: 2 });
        let w = wer([(&l(&[1, 2, 3]), &l(&[1, 9, 3, 4]))]).unwrap();
        assert!((w - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pure_deletion_and_all_empty_hypotheses() {
        assert_eq!(edit_counts(&l(&[1]), &l(&[])), EditCounts { s: 0, d: 1, i: 0, h: 0 });
        let refs = [l(&[1, 2]), l(&[3])];
        let empty = l(&[]);
        assert_eq!(wer(refs.iter().map(|r| (r, &empty))).unwrap(), 1.0);
    }

    #[test]
    fn wer_needs_reference_tokens() {
        let e = l(&[]);
        assert!(matches!(wer([(&e, &e)]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(wer(std::iter::empty()), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn wer_pools_counts() {
        // 1 error over 1 token, 0 errors over 3 tokens → 1/4, not mean(1, 0)
        let (a, b, c) = (l(&[1]), l(&[2]), l(&[1, 2, 3]));
        assert_eq!(wer([(&a, &b), (&c, &c)]).unwrap(), 0.25);
    }

    #[test]
    fn overlap_examples() {
        let s = |v: &[u32]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(overlap_rate(&s(&[1, 2]), &s(&[1, 2])), 1.0);
        assert_eq!(overlap_rate(&s(&[1]), &s(&[2])), 0.0);
        assert_eq!(overlap_rate(&s(&[1, 2, 3]), &s(&[2, 3, 4])), 0.5);
        assert_eq!(overlap_rate(&s(&[]), &s(&[])), 1.0);
        assert_eq!(overlap_min_ratio(&s(&[1, 2, 3]), &s(&[2, 3])), 1.0);
    }

    #[test]
    fn random_jaccard_matches_enumeration() {
        // n=5, m=2 fixed {0,1}; enumerate all 3-subsets.
        let (n, k, m) = (5usize, 3usize, 2usize);
        let fixed: BTreeSet<usize> = (0..m).collect();
        let mut total = 0.0;
        let mut count = 0;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let r: BTreeSet<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            total += overlap_rate(&r, &fixed);
            count += 1;
        }
        assert!((random_subset_jaccard(n, k, m) - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(histogram(&[4.2], 5).unwrap().counts, vec![1]);
        let h = histogram(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.bin_edges, vec![0.0, 1.5, 3.0]);
        assert!(matches!(histogram(&[], 3), Err(Error::EmptyInput(_))));
    }
}
