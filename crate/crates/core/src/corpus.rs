//! Synthetic token-conditioned Gaussian corpora and their on-disk manifests.
//!
//! Every token owns a fixed mean vector. An utterance is a random token
//! string; each token occupies a random run of consecutive frames, each frame
//! being the token mean plus isotropic Gaussian noise. Silence frames (mean at
//! the origin) are inserted between identical neighbours so every label is
//! CTC-feasible, and optionally at random elsewhere. Each utterance draws its
//! own noise level, and is then rescaled to unit frame energy so that noisier
//! utterances carry proportionally less token signal.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const BLANK: usize = 0;

const MANIFEST_SCHEMA: &str = "ipl.manifest.v1";
const TRUTH_SCHEMA: &str = "ipl.oracle-truth.v1";
const CORPUS_SCHEMA: &str = "ipl.corpus.v1";

/// Token inventory. Index 0 is always the CTC blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 non-blank tokens, got {}",
                tokens.len()
            )));
        }
        let mut names = Vec::with_capacity(tokens.len() + 1);
        names.push("<blank>".to_string());
        names.extend(tokens);
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Validation(format!("duplicate token name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// `size` tokens named `a`, `b`, ... (then `t26`, `t27`, ...).
    pub fn with_size(size: usize) -> Result<Self> {
        let tokens = (0..size)
            .map(|i| {
                if i < 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        Self::new(tokens)
    }

    /// Number of non-blank tokens.
    pub fn len(&self) -> usize {
        self.names.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model output width: non-blank tokens plus blank.
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.names[1..]
    }

    pub fn render(&self, labels: &LabelSequence) -> String {
        labels
            .0
            .iter()
            .map(|&i| self.name(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token indices in `1..=vocab.len()`; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for &t in &self.0 {
            if t == BLANK || t > vocab.len() {
                return Err(Error::Validation(format!(
                    "token index {t} outside 1..={}",
                    vocab.len()
                )));
            }
        }
        Ok(())
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// A T×D frame matrix for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Array2<f64>,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

impl Utterance {
    pub fn id(&self) -> &str {
        &self.features.id
    }
}

/// Ground truth for the unlabeled split.
///
/// Only oracle evaluation (the WER filter, oracle statistics in reports and
/// threshold estimation against labeled probes) should call [`HiddenTruth::reveal`].
/// Training entry points take `&[Utterance]` / `&[FeatureSequence]` and never see it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenTruth {
    by_id: BTreeMap<String, LabelSequence>,
}

impl HiddenTruth {
    pub fn new(by_id: BTreeMap<String, LabelSequence>) -> Self {
        Self { by_id }
    }

    pub fn reveal(&self, id: &str) -> Option<&LabelSequence> {
        self.by_id.get(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub vocab: Vocabulary,
    pub labeled: Vec<Utterance>,
    pub unlabeled: Vec<FeatureSequence>,
    pub unlabeled_truth: HiddenTruth,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl CorpusSplits {
    pub fn feature_dim(&self) -> usize {
        self.labeled
            .first()
            .map(|u| u.features.dim())
            .or_else(|| self.unlabeled.first().map(FeatureSequence::dim))
            .or_else(|| self.dev.first().map(|u| u.features.dim()))
            .or_else(|| self.test.first().map(|u| u.features.dim()))
            .unwrap_or(0)
    }

    /// Checks id uniqueness, label validity, constant D, T ≥ 1, and that the
    /// hidden truth covers exactly the unlabeled ids.
    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        let mut ids = HashSet::new();
        let labeled = self.labeled.iter().chain(&self.dev).chain(&self.test);
        let features = labeled
            .clone()
            .map(|u| &u.features)
            .chain(self.unlabeled.iter());
        for f in features {
            if !ids.insert(f.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance_id `{}`", f.id)));
            }
            if f.num_frames() == 0 {
                return Err(Error::Validation(format!("utterance `{}` has no frames", f.id)));
            }
            if f.dim() != dim {
                return Err(Error::Validation(format!(
                    "utterance `{}` has D={}, corpus D={dim}",
                    f.id,
                    f.dim()
                )));
            }
        }
        for u in labeled {
            u.labels.validate(&self.vocab)?;
        }
        if self.unlabeled_truth.len() != self.unlabeled.len() {
            return Err(Error::Validation(format!(
                "hidden truth has {} entries for {} unlabeled utterances",
                self.unlabeled_truth.len(),
                self.unlabeled.len()
            )));
        }
        for f in &self.unlabeled {
            let truth = self.unlabeled_truth.reveal(&f.id).ok_or_else(|| {
                Error::Validation(format!("no hidden truth for unlabeled `{}`", f.id))
            })?;
            truth.validate(&self.vocab)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusGenConfig {
    /// Non-blank tokens.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub min_label_len: usize,
    pub max_label_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Frame noise scale σ.
    pub noise: f64,
    /// Per-utterance noise is σ·exp(j·U(-1,1)); 0 gives every utterance the same σ.
    pub noise_jitter: f64,
    /// Euclidean norm of every token mean vector. Means are mutually
    /// orthogonal when `vocab_size <= feature_dim`, random directions otherwise.
    pub mean_norm: f64,
    /// Probability of a silence frame after each token (forced between repeats).
    pub gap_prob: f64,
    /// Rescale each utterance to unit mean squared frame norm.
    pub normalize: bool,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            feature_dim: 32,
            min_label_len: 3,
            max_label_len: 8,
            min_frames_per_token: 1,
            max_frames_per_token: 4,
            noise: 0.2,
            noise_jitter: 0.8,
            mean_norm: 1.0,
            gap_prob: 0.2,
            normalize: true,
            n_labeled: 16,
            n_unlabeled: 400,
            n_dev: 600,
            n_test: 300,
        }
    }
}

impl CorpusGenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        if self.min_label_len == 0 || self.min_label_len > self.max_label_len {
            return fail("label length range must satisfy 1 <= min <= max");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return fail("frames-per-token range must satisfy 1 <= min <= max");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and non-negative");
        }
        if !(self.noise_jitter >= 0.0 && self.noise_jitter.is_finite()) {
            return fail("noise_jitter must be finite and non-negative");
        }
        if !(self.mean_norm > 0.0 && self.mean_norm.is_finite()) {
            return fail("mean_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.gap_prob) {
            return fail("gap_prob must lie in [0, 1]");
        }
        if self.n_labeled == 0 || self.n_unlabeled == 0 || self.n_dev == 0 || self.n_test == 0 {
            return fail("every split must be non-empty");
        }
        Ok(())
    }
}

struct Generator<'a> {
    cfg: &'a CorpusGenConfig,
    means: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn utterance(&mut self, id: String) -> Utterance {
        let cfg = self.cfg;
        let len = self.rng.random_range(cfg.min_label_len..=cfg.max_label_len);
        let labels: Vec<usize> = (0..len)
            .map(|_| self.rng.random_range(1..=cfg.vocab_size))
            .collect();
        let jitter: f64 = if cfg.noise_jitter > 0.0 {
            self.rng.random_range(-1.0..=1.0)
        } else {
            0.0
        };
        let sigma = cfg.noise * (cfg.noise_jitter * jitter).exp();

        // Class per frame; BLANK marks silence.
        let mut classes = Vec::new();
        for (i, &tok) in labels.iter().enumerate() {
            let n = self
                .rng
                .random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token);
            classes.extend(std::iter::repeat_n(tok, n));
            let last = i + 1 == labels.len();
            let forced = !last && labels[i + 1] == tok;
            if forced || (!last && self.rng.random_bool(cfg.gap_prob)) {
                classes.push(BLANK);
            }
        }

        let d = cfg.feature_dim;
        let mut frames = Array2::zeros((classes.len(), d));
        for (t, &c) in classes.iter().enumerate() {
            for k in 0..d {
                let noise: f64 = self.rng.sample(StandardNormal);
                frames[[t, k]] = self.means[c][k] + sigma * noise;
            }
        }
        if cfg.normalize {
            let energy = frames.iter().map(|x| x * x).sum::<f64>() / classes.len() as f64;
            if energy > 0.0 {
                frames.mapv_inplace(|x| x / energy.sqrt());
            }
        }
        Utterance {
            features: FeatureSequence { id, frames },
            labels: LabelSequence(labels),
        }
    }

    fn split(&mut self, prefix: &str, n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| self.utterance(format!("{prefix}-{i:05}")))
            .collect()
    }
}

/// Deterministic in `(cfg, seed)`.
pub fn generate_corpus(cfg: &CorpusGenConfig, seed: u64) -> Result<CorpusSplits> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.feature_dim;
    let mut means = vec![vec![0.0; d]];
    for _ in 0..cfg.vocab_size {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if cfg.vocab_size <= d {
            // Gram-Schmidt against earlier token means: equal pairwise separation.
            for m in &means[1..] {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / (cfg.mean_norm * cfg.mean_norm);
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x *= cfg.mean_norm / norm);
        means.push(v);
    }
    let mut g = Generator { cfg, means, rng };
    let labeled = g.split("lab", cfg.n_labeled);
    let unlabeled_full = g.split("unl", cfg.n_unlabeled);
    let dev = g.split("dev", cfg.n_dev);
    let test = g.split("tst", cfg.n_test);

    let mut truth = BTreeMap::new();
    let mut unlabeled = Vec::with_capacity(unlabeled_full.len());
    for u in unlabeled_full {
        truth.insert(u.features.id.clone(), u.labels);
        unlabeled.push(u.features);
    }
    Ok(CorpusSplits {
        vocab: Vocabulary::with_size(cfg.vocab_size)?,
        labeled,
        unlabeled,
        unlabeled_truth: HiddenTruth::new(truth),
        dev,
        test,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    t: usize,
    d: usize,
    frames: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    id: String,
    tokens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    schema: String,
    tokens: Vec<String>,
    feature_dim: usize,
}

fn to_record(f: &FeatureSequence, tokens: Option<&LabelSequence>) -> UtteranceRecord {
    UtteranceRecord {
        id: f.id.clone(),
        t: f.num_frames(),
        d: f.dim(),
        frames: f.frames.iter().copied().collect(),
        tokens: tokens.map(|l| l.0.clone()),
    }
}

fn from_record(path: &Path, line: usize, r: UtteranceRecord) -> Result<(FeatureSequence, Option<LabelSequence>)> {
    if r.frames.len() != r.t * r.d {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("frame count {} != t*d = {}*{}", r.frames.len(), r.t, r.d),
        });
    }
    let frames = Array2::from_shape_vec((r.t, r.d), r.frames).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })?;
    Ok((FeatureSequence { id: r.id, frames }, r.tokens.map(LabelSequence)))
}

const SPLITS: [&str; 4] = ["labeled", "unlabeled", "dev", "test"];

pub fn save_manifest(splits: &CorpusSplits, dir: &Path) -> Result<()> {
    splits.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CorpusHeader {
        schema: CORPUS_SCHEMA.into(),
        tokens: splits.vocab.tokens().to_vec(),
        feature_dim: splits.feature_dim(),
    };
    let header_path = dir.join("corpus.json");
    let body = serde_json::to_string_pretty(&header).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&header_path, body + "\n").map_err(|e| Error::io(&header_path, e))?;

    for name in SPLITS {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let records: Vec<UtteranceRecord> = match name {
            "labeled" => splits.labeled.iter().map(|u| to_record(&u.features, Some(&u.labels))).collect(),
            "dev" => splits.dev.iter().map(|u| to_record(&u.features, Some(&u.labels))).collect(),
            "test" => splits.test.iter().map(|u| to_record(&u.features, Some(&u.labels))).collect(),
            _ => splits.unlabeled.iter().map(|f| to_record(f, None)).collect(),
        };
        jsonl::write(&sub.join("utterances.jsonl"), MANIFEST_SCHEMA, &records)?;
    }
    let truth: Vec<TruthRecord> = splits
        .unlabeled
        .iter()
        .map(|f| TruthRecord {
            id: f.id.clone(),
            tokens: splits.unlabeled_truth.reveal(&f.id).map(|l| l.0.clone()).unwrap_or_default(),
        })
        .collect();
    jsonl::write(&dir.join("unlabeled").join("oracle_truth.jsonl"), TRUTH_SCHEMA, &truth)
}

fn load_split(dir: &Path, name: &str, labeled: bool) -> Result<Vec<(FeatureSequence, Option<LabelSequence>)>> {
    let path = dir.join(name).join("utterances.jsonl");
    let records: Vec<UtteranceRecord> = jsonl::read(&path, MANIFEST_SCHEMA)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            // +2: schema tag occupies line 1.
            let line = i + 2;
            let (f, tokens) = from_record(&path, line, r)?;
            if labeled != tokens.is_some() {
                return Err(Error::Parse {
                    path: path.clone(),
                    line,
                    message: if labeled { "missing tokens".into() } else { "unexpected tokens in unlabeled split".into() },
                });
            }
            Ok((f, tokens))
        })
        .collect()
}

pub fn load_manifest(dir: &Path) -> Result<CorpusSplits> {
    let header_path = dir.join("corpus.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: CorpusHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: header_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if header.schema != CORPUS_SCHEMA {
        return Err(Error::Parse {
            path: header_path,
            line: 1,
            message: format!("expected schema `{CORPUS_SCHEMA}`, found `{}`", header.schema),
        });
    }
    let vocab = Vocabulary::new(header.tokens)?;
    let to_utts = |v: Vec<(FeatureSequence, Option<LabelSequence>)>| -> Vec<Utterance> {
        v.into_iter()
            .map(|(features, labels)| Utterance {
                features,
                labels: labels.unwrap_or_default(),
            })
            .collect()
    };
    let labeled = to_utts(load_split(dir, "labeled", true)?);
    let unlabeled: Vec<FeatureSequence> = load_split(dir, "unlabeled", false)?.into_iter().map(|(f, _)| f).collect();
    let dev = to_utts(load_split(dir, "dev", true)?);
    let test = to_utts(load_split(dir, "test", true)?);

    let truth_path = dir.join("unlabeled").join("oracle_truth.jsonl");
    let truth_records: Vec<TruthRecord> = jsonl::read(&truth_path, TRUTH_SCHEMA)?;
    let mut truth = BTreeMap::new();
    for (i, r) in truth_records.into_iter().enumerate() {
        if truth.insert(r.id.clone(), LabelSequence(r.tokens)).is_some() {
            return Err(Error::Validation(format!(
                "{}:{}: duplicate utterance_id `{}`",
                truth_path.display(),
                i + 2,
                r.id
            )));
        }
    }

    let splits = CorpusSplits {
        vocab,
        labeled,
        unlabeled,
        unlabeled_truth: HiddenTruth::new(truth),
        dev,
        test,
    };
    splits.validate()?;
    if splits.feature_dim() != header.feature_dim {
        return Err(Error::Validation(format!(
            "header feature_dim {} disagrees with records ({})",
            header.feature_dim,
            splits.feature_dim()
        )));
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusGenConfig {
        CorpusGenConfig {
            n_labeled: 2,
            n_unlabeled: 3,
            n_dev: 2,
            n_test: 1,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_frames_are_token_means() {
        let cfg = CorpusGenConfig { noise: 0.0, ..small() };
        let c = generate_corpus(&cfg, 3).unwrap();
        for u in &c.labeled {
            // Each frame is one of |V|+1 exact vectors; distinct rows ≤ |V|+1.
            let mut rows: Vec<Vec<u64>> = u
                .features
                .frames
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|x| x.to_bits()).collect())
                .collect();
            rows.sort();
            rows.dedup();
            assert!(rows.len() <= cfg.vocab_size + 1);
            assert!(rows.len() <= u.labels.len() + 1);
        }
    }

    #[test]
    fn repeats_get_a_separating_silence_frame() {
        let cfg = CorpusGenConfig {
            vocab_size: 2,
            gap_prob: 0.0,
            noise: 0.0,
            n_labeled: 50,
            ..small()
        };
        let c = generate_corpus(&cfg, 11).unwrap();
        for u in &c.labeled {
            let repeats = u.labels.0.windows(2).filter(|w| w[0] == w[1]).count();
            assert!(u.features.num_frames() >= u.labels.len() + repeats);
            let silent = u
                .features
                .frames
                .rows()
                .into_iter()
                .filter(|r| r.iter().all(|&x| x == 0.0))
                .count();
            assert_eq!(silent, repeats);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            CorpusGenConfig { vocab_size: 1, ..small() },
            CorpusGenConfig { n_dev: 0, ..small() },
            CorpusGenConfig { min_frames_per_token: 0, ..small() },
            CorpusGenConfig { min_label_len: 5, max_label_len: 4, ..small() },
            CorpusGenConfig { noise: -1.0, ..small() },
        ] {
            assert!(matches!(generate_corpus(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_tiny_inventories() {
        assert!(Vocabulary::new(vec!["a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "<blank>".into()]).is_err());
        let v = Vocabulary::with_size(3).unwrap();
        assert_eq!(v.num_classes(), 4);
        assert_eq!(v.render(&LabelSequence(vec![1, 3])), "a c");
    }

    #[test]
    fn labels_never_contain_blank() {
        let c = generate_corpus(&CorpusGenConfig::default(), 5).unwrap();
        assert!(c.labeled.iter().all(|u| !u.labels.0.contains(&BLANK)));
        c.validate().unwrap();
    }
}
