use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use ipl_core::corpus::{generate_corpus, load_manifest, save_manifest, CorpusGenConfig, LabelSequence, BLANK};
use ipl_core::ctc::{collapse, ctc_log_prob, greedy_decode, log_sum_exp, min_frames};
use ipl_core::jsonl;
use ipl_core::metrics::{edit_counts, overlap_rate, random_subset_jaccard, utterance_wer, wer};
use ipl_core::model::{init_model, AcousticModel, FrameLogProbs};
use ipl_core::pseudolabel::{score_utterance, ThresholdSchedule};

fn labels(max_len: usize, vocab: usize) -> impl Strategy<Value = LabelSequence> {
    prop::collection::vec(1..=vocab, 0..=max_len).prop_map(LabelSequence)
}

fn frame_log_probs(max_t: usize, k: usize) -> impl Strategy<Value = FrameLogProbs> {
    (1..=max_t)
        .prop_flat_map(move |t| prop::collection::vec(-4.0f64..4.0, t * k))
        .prop_map(move |v| FrameLogProbs::from_logits("x", Array2::from_shape_vec((v.len() / k, k), v).unwrap()))
}

/// Every label sequence with tokens in `1..=vocab` and length `<= max_len`.
fn all_label_sequences(vocab: usize, max_len: usize) -> Vec<LabelSequence> {
    let mut out = vec![LabelSequence(vec![])];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for tok in 1..=vocab {
                let mut e: Vec<usize> = s.clone();
                e.push(tok);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned().map(LabelSequence));
        frontier = next;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn edit_count_identities(a in labels(10, 4), b in labels(10, 4)) {
        let c = edit_counts(&a, &b);
        prop_assert_eq!(c.s + c.d + c.h, a.len());
        prop_assert_eq!(c.s + c.i + c.h, b.len());
        prop_assert_eq!(edit_counts(&a, &a).errors(), 0);
        // Symmetric distance; insertions and deletions swap.
        let r = edit_counts(&b, &a);
        prop_assert_eq!(r.errors(), c.errors());
        prop_assert!(c.errors() >= a.len().abs_diff(b.len()));
        prop_assert!(c.errors() <= a.len().max(b.len()));
    }

    #[test]
    fn pooled_wer_weights_by_reference_length(
        pairs in prop::collection::vec((labels(6, 3), labels(6, 3)), 1..8)
    ) {
        let total_ref: usize = pairs.iter().map(|(r, _)| r.len()).sum();
        let result = wer(pairs.iter().map(|(r, h)| (r, h)));
        if total_ref == 0 {
            prop_assert!(result.is_err());
        } else {
            let errors: usize = pairs.iter().map(|(r, h)| edit_counts(r, h).errors()).sum();
            prop_assert_eq!(result.unwrap(), errors as f64 / total_ref as f64);
        }
    }

    #[test]
    fn ctc_probabilities_sum_to_one_over_all_labelings(logp in frame_log_probs(4, 3)) {
        // Every alignment collapses to exactly one labeling of length <= T.
        let t = logp.num_frames();
        let mut terms = Vec::new();
        for l in all_label_sequences(2, t) {
            match ctc_log_prob(&logp, &l, false) {
                Ok(r) => terms.push(r.log_prob),
                Err(_) => prop_assert!(min_frames(l.as_slice()) > t),
            }
        }
        prop_assert!(log_sum_exp(&terms).abs() < 1e-9);
    }

    #[test]
    fn ctc_feasibility_is_monotone_in_frames(l in labels(5, 3), extra in 0usize..4) {
        let need = min_frames(l.as_slice()).max(1);
        let ok = FrameLogProbs::uniform("u", need + extra, 4);
        prop_assert!(ctc_log_prob(&ok, &l, false).is_ok());
        if need > 1 && !l.is_empty() {
            let short = FrameLogProbs::uniform("u", need - 1, 4);
            prop_assert!(ctc_log_prob(&short, &l, false).is_err());
        }
    }

    #[test]
    fn ctc_gradient_rows_sum_to_zero(logp in frame_log_probs(6, 4), l in labels(3, 3)) {
        if let Ok(r) = ctc_log_prob(&logp, &l, true) {
            prop_assert!(r.log_prob <= 1e-12);
            for row in r.grad.unwrap().rows() {
                prop_assert!(row.sum().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn greedy_hypothesis_is_collapsed_alignment(logp in frame_log_probs(12, 5)) {
        let g = greedy_decode(&logp);
        prop_assert_eq!(g.alignment.0.len(), logp.num_frames());
        prop_assert_eq!(&collapse(&g.alignment.0), &g.hypothesis);
        prop_assert!(!g.hypothesis.0.contains(&BLANK));
        // The greedy path is always a feasible alignment of its own hypothesis.
        prop_assert!(ctc_log_prob(&logp, &g.hypothesis, false).is_ok());
    }

    #[test]
    fn rows_are_normalised_and_score_is_bounded(logp in frame_log_probs(10, 6)) {
        for row in logp.logp.rows() {
            prop_assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
        }
        let s = score_utterance(&logp);
        prop_assert!(s <= 0.0);
        prop_assert!(s >= -(6f64).ln() - 1e-12);
    }

    #[test]
    fn utterance_wer_is_zero_only_on_match(a in labels(6, 3), b in labels(6, 3)) {
        prop_assume!(!a.is_empty());
        let w = utterance_wer(&a, &b);
        prop_assert_eq!(w == 0.0, a == b);
    }

    #[test]
    fn random_jaccard_is_a_probability(n in 1usize..40, k in 0usize..40, m in 0usize..40) {
        let (k, m) = (k.min(n), m.min(n));
        let j = random_subset_jaccard(n, k, m);
        prop_assert!((0.0..=1.0).contains(&j));
        if k == n && m == n {
            prop_assert_eq!(j, 1.0);
        }
    }

    #[test]
    fn overlap_is_symmetric(a in prop::collection::btree_set(0u8..20, 0..10), b in prop::collection::btree_set(0u8..20, 0..10)) {
        prop_assert_eq!(overlap_rate(&a, &b), overlap_rate(&b, &a));
        let j = overlap_rate(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
    }

    #[test]
    fn schedule_is_strictly_decreasing(initial in -1.0f64..0.0, step in 0.001f64..0.2, n in 1usize..20) {
        let mut s = ThresholdSchedule::new(initial, step, 3).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..n {
            let (e, next) = s.next();
            prop_assert!(e < prev);
            prev = e;
            s = next;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact(d in 1usize..5, v in 1usize..4, h in 0usize..3, seed in 0u64..1000) {
        let m = init_model(d, v, h, seed).unwrap();
        let text = m.to_checkpoint_string();
        let back = AcousticModel::from_checkpoint_str(std::path::Path::new("mem"), &text).unwrap();
        prop_assert_eq!(back.to_checkpoint_string(), text);
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn manifest_round_trip(
        vocab in 2usize..6,
        dim in 1usize..6,
        max_len in 1usize..5,
        max_frames in 1usize..4,
        gap in 0.0f64..1.0,
        normalize in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let cfg = CorpusGenConfig {
            vocab_size: vocab,
            feature_dim: dim,
            min_label_len: 1,
            max_label_len: max_len,
            min_frames_per_token: 1,
            max_frames_per_token: max_frames,
            gap_prob: gap,
            normalize,
            n_labeled: 3,
            n_unlabeled: 4,
            n_dev: 2,
            n_test: 2,
            ..CorpusGenConfig::default()
        };
        let splits = generate_corpus(&cfg, seed).unwrap();
        splits.validate().unwrap();
        for u in splits.labeled.iter().chain(&splits.dev).chain(&splits.test) {
            prop_assert!(min_frames(u.labels.as_slice()) <= u.features.num_frames());
        }
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&splits, dir.path()).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        prop_assert_eq!(&back, &splits);
        prop_assert_eq!(generate_corpus(&cfg, seed).unwrap(), splits);
    }
}

#[test]
fn jsonl_reports_line_of_malformed_record() {
    let text = "{\"schema\":\"s.v1\"}\n[1]\n[2\n";
    let err = jsonl::parse::<Vec<u32>>(std::path::Path::new("x.jsonl"), "s.v1", text).unwrap_err();
    assert!(err.to_string().contains(":3"), "{err}");
    let err = jsonl::parse::<Vec<u32>>(std::path::Path::new("x.jsonl"), "other.v1", text).unwrap_err();
    assert!(err.to_string().contains(":1"), "{err}");
}

#[test]
fn distinct_ids_across_splits() {
    let splits = generate_corpus(&CorpusGenConfig::default(), 11).unwrap();
    let mut ids = BTreeSet::new();
    for id in splits
        .labeled
        .iter()
        .chain(&splits.dev)
        .chain(&splits.test)
        .map(|u| u.features.id.clone())
        .chain(splits.unlabeled.iter().map(|f| f.id.clone()))
    {
        assert!(ids.insert(id));
    }
    assert_eq!(splits.unlabeled_truth.len(), splits.unlabeled.len());
}
