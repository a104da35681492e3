//! Per-frame acoustic model, Adam/SGD optimisation and the tri-state
//! (warmup / hold / linear decay) learning-rate schedule.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureSequence, LabelSequence, Utterance};
use crate::ctc;
use crate::error::{Error, Result};

/// T×(|V|+1) log-probabilities, time-major. Column 0 is the blank.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogProbs {
    pub id: String,
    pub logp: Array2<f64>,
}

impl FrameLogProbs {
    pub fn from_logits(id: impl Into<String>, mut logits: Array2<f64>) -> Self {
        log_softmax_rows(&mut logits);
        Self {
            id: id.into(),
            logp: logits,
        }
    }

    /// Takes `ln` of (possibly unnormalised) non-negative rows and renormalises.
    pub fn from_probs(id: impl Into<String>, probs: Array2<f64>) -> Self {
        Self::from_logits(id, probs.mapv(f64::ln))
    }

    pub fn uniform(id: impl Into<String>, frames: usize, classes: usize) -> Self {
        Self {
            id: id.into(),
            logp: Array2::from_elem((frames, classes), -(classes as f64).ln()),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.logp.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.logp.ncols()
    }
}

pub fn log_softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let lse = ctc::log_sum_exp(row.as_slice().expect("standard layout"));
        row.mapv_inplace(|x| x - lse);
    }
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    /// H×D; empty for the linear model.
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    /// (|V|+1)×I where I = H, or D for the linear model.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Params {
    fn zeros(feature_dim: usize, classes: usize, hidden_dim: usize) -> Self {
        let inner = if hidden_dim == 0 { feature_dim } else { hidden_dim };
        let hid_in = if hidden_dim == 0 { 0 } else { feature_dim };
        Self {
            w_hidden: Array2::zeros((hidden_dim, hid_in)),
            b_hidden: Array1::zeros(hidden_dim),
            w_out: Array2::zeros((classes, inner)),
            b_out: Array1::zeros(classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_hidden: Array2::zeros(self.w_hidden.raw_dim()),
            b_hidden: Array1::zeros(self.b_hidden.raw_dim()),
            w_out: Array2::zeros(self.w_out.raw_dim()),
            b_out: Array1::zeros(self.b_out.raw_dim()),
        }
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w_hidden.as_slice().expect("standard layout"),
            self.b_hidden.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_hidden.as_slice_mut().expect("standard layout"),
            self.b_hidden.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Per-frame network: optional tanh hidden layer, then an affine map to
/// |V|+1 logits and a log-softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    pub feature_dim: usize,
    /// Non-blank tokens.
    pub vocab_size: usize,
    /// 0 means linear.
    pub hidden_dim: usize,
    pub seed: u64,
    pub params: Params,
}

struct ForwardCache {
    /// Post-tanh activations (T×H); `None` for the linear model.
    hidden: Option<Array2<f64>>,
    logp: Array2<f64>,
}

pub fn init_model(feature_dim: usize, vocab_size: usize, hidden_dim: usize, seed: u64) -> Result<AcousticModel> {
    if feature_dim == 0 || vocab_size == 0 {
        return Err(Error::Config(format!(
            "model dims must be >= 1 (feature_dim={feature_dim}, vocab_size={vocab_size})"
        )));
    }
    let classes = vocab_size + 1;
    let mut params = Params::zeros(feature_dim, classes, hidden_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |w: &mut Array2<f64>| {
        let std = 1.0 / (w.ncols().max(1) as f64).sqrt();
        w.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
    };
    fill(&mut params.w_hidden);
    fill(&mut params.w_out);
    Ok(AcousticModel {
        feature_dim,
        vocab_size,
        hidden_dim,
        seed,
        params,
    })
}

impl AcousticModel {
    pub fn num_classes(&self) -> usize {
        self.vocab_size + 1
    }

    fn check_dim(&self, features: &FeatureSequence) -> Result<()> {
        if features.dim() != self.feature_dim {
            return Err(Error::Shape(format!(
                "utterance `{}` has D={}, model expects {}",
                features.id,
                features.dim(),
                self.feature_dim
            )));
        }
        if features.num_frames() == 0 {
            return Err(Error::Shape(format!("utterance `{}` has no frames", features.id)));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Array2<f64>) -> ForwardCache {
        let p = &self.params;
        let hidden = (self.hidden_dim > 0).then(|| {
            let mut h = x.dot(&p.w_hidden.t()) + &p.b_hidden;
            h.mapv_inplace(f64::tanh);
            h
        });
        let inner = hidden.as_ref().unwrap_or(x);
        let mut logp = inner.dot(&p.w_out.t()) + &p.b_out;
        log_softmax_rows(&mut logp);
        ForwardCache { hidden, logp }
    }

    pub fn forward(&self, features: &FeatureSequence) -> Result<FrameLogProbs> {
        self.check_dim(features)?;
        Ok(FrameLogProbs {
            id: features.id.clone(),
            logp: self.forward_cached(&features.frames).logp,
        })
    }

    fn backward(&self, x: &Array2<f64>, cache: &ForwardCache, dlogits: &Array2<f64>) -> Params {
        let p = &self.params;
        let mut g = p.zeros_like();
        let inner = cache.hidden.as_ref().unwrap_or(x);
        g.w_out = dlogits.t().dot(inner);
        g.b_out = dlogits.sum_axis(Axis(0));
        if let Some(h) = &cache.hidden {
            let mut da = dlogits.dot(&p.w_out);
            da.zip_mut_with(h, |d, &hv| *d *= 1.0 - hv * hv);
            g.w_hidden = da.t().dot(x);
            g.b_hidden = da.sum_axis(Axis(0));
        }
        g
    }

    /// CTC loss `-ln P(labels | features)` and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, features: &FeatureSequence, labels: &LabelSequence) -> Result<(f64, Params)> {
        self.check_dim(features)?;
        let cache = self.forward_cached(&features.frames);
        let logp = FrameLogProbs {
            id: features.id.clone(),
            logp: cache.logp.clone(),
        };
        let r = ctc::ctc_log_prob(&logp, labels, true)?;
        let grad = self.backward(&features.frames, &cache, r.grad.as_ref().expect("requested"));
        Ok((r.loss(), grad))
    }

    pub fn loss(&self, features: &FeatureSequence, labels: &LabelSequence) -> Result<f64> {
        Ok(ctc::ctc_log_prob(&self.forward(features)?, labels, false)?.loss())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_iter: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    /// Shuffle seed.
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_iter: 4,
            batch_size: 8,
            base_lr: 0.05,
            warmup_frac: 0.10,
            hold_frac: 0.40,
            seed: 0,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if !frac(self.warmup_frac) || !frac(self.hold_frac) || self.warmup_frac + self.hold_frac > 1.0 {
            return Err(Error::Config(format!(
                "warmup_frac={} and hold_frac={} must lie in [0,1] and sum to at most 1",
                self.warmup_frac, self.hold_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Tri-state schedule: linear 0 → base over the first `warmup_frac` of
/// steps, constant through `warmup_frac + hold_frac`, then linear down to 0 at
/// the final step. Progress is `step / (total_steps - 1)`; a single-step run
/// uses `base_lr`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Contract(format!("step {step} outside 0..{total_steps}")));
    }
    if total_steps == 1 {
        return Ok(cfg.base_lr);
    }
    let p = step as f64 / (total_steps - 1) as f64;
    let warm = cfg.warmup_frac;
    let flat_end = cfg.warmup_frac + cfg.hold_frac;
    let lr = if p < warm {
        cfg.base_lr * p / warm
    } else if p <= flat_end || flat_end >= 1.0 {
        cfg.base_lr
    } else {
        cfg.base_lr * (1.0 - p) / (1.0 - flat_end)
    };
    Ok(lr)
}

struct Optimizer {
    kind: OptimizerKind,
    m: Params,
    v: Params,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, like: &Params) -> Self {
        Self {
            kind,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params, grad: &Params, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let iter = params
                    .slices_mut()
                    .into_iter()
                    .zip(grad.slices())
                    .zip(self.m.slices_mut().into_iter().zip(self.v.slices_mut()));
                for ((p, g), (m, v)) in iter {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One training pair with its weight in the batch gradient.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a> {
    pub features: &'a FeatureSequence,
    pub labels: &'a LabelSequence,
    pub weight: f64,
}

pub fn examples_from(data: &[Utterance]) -> Vec<TrainExample<'_>> {
    data.iter()
        .map(|u| TrainExample {
            features: &u.features,
            labels: &u.labels,
            weight: 1.0,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AcousticModel,
    /// Mean per-utterance CTC loss of each epoch, measured before each batch update.
    pub loss_curve: Vec<f64>,
}

/// Mini-batch training on the CTC loss. The batch gradient is the mean of
/// weighted per-utterance gradients; per-utterance work runs in parallel and
/// is reduced in a fixed order.
pub fn train(model: &AcousticModel, data: &[TrainExample<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(model, data, cfg, &mut |_, _| Ok(()))
}

/// [`train`], calling `on_epoch(epoch, model)` after every epoch (0-based).
pub fn train_observed(
    model: &AcousticModel,
    data: &[TrainExample<'_>],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &AcousticModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for ex in data {
        model.check_dim(ex.features)?;
        ex.labels.validate_classes(model.num_classes())?;
        if ex.features.num_frames() < ctc::min_frames(ex.labels.as_slice()) {
            return Err(Error::Infeasible {
                utterance: Some(ex.features.id.clone()),
                frames: ex.features.num_frames(),
                labels: ex.labels.len(),
                repeats: ctc::min_frames(ex.labels.as_slice()) - ex.labels.len(),
            });
        }
    }
    let mut model = model.clone();
    if data.is_empty() || cfg.epochs_per_iter == 0 {
        return Ok(TrainOutcome {
            model,
            loss_curve: vec![],
        });
    }
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs_per_iter * batches_per_epoch;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs_per_iter);
    let mut step = 0;
    for epoch in 0..cfg.epochs_per_iter {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Params)>> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(data[i].features, data[i].labels))
                .collect();
            let mut grad = model.params.zeros_like();
            for (&i, r) in batch.iter().zip(results) {
                let (loss, g) = r?;
                epoch_loss += loss;
                grad.add_scaled(&g, data[i].weight / batch.len() as f64);
            }
            let lr = lr_at(step, total_steps, cfg)?;
            opt.step(&mut model.params, &grad, lr);
            step += 1;
        }
        loss_curve.push(epoch_loss / data.len() as f64);
        on_epoch(epoch, &model)?;
    }
    Ok(TrainOutcome { model, loss_curve })
}

impl LabelSequence {
    fn validate_classes(&self, classes: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t == 0 || t >= classes) {
            Some(bad) => Err(Error::Validation(format!(
                "label index {bad} invalid for {classes} output classes"
            ))),
            None => Ok(()),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "ipl.checkpoint.v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    feature_dim: usize,
    vocab_size: usize,
    hidden_dim: usize,
    seed: u64,
    w_hidden: Vec<f64>,
    b_hidden: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

impl AcousticModel {
    pub fn to_checkpoint_string(&self) -> String {
        let [wh, bh, wo, bo] = self.params.slices();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            feature_dim: self.feature_dim,
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            seed: self.seed,
            w_hidden: wh.to_vec(),
            b_hidden: bh.to_vec(),
            w_out: wo.to_vec(),
            b_out: bo.to_vec(),
        };
        serde_json::to_string(&ck).expect("checkpoint serialises") + "\n"
    }

    pub fn from_checkpoint_str(path: &Path, text: &str) -> Result<Self> {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message,
        };
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(parse(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let mut model = init_model(ck.feature_dim, ck.vocab_size, ck.hidden_dim, ck.seed)?;
        let sources = [ck.w_hidden, ck.b_hidden, ck.w_out, ck.b_out];
        for (dst, src) in model.params.slices_mut().into_iter().zip(sources) {
            if dst.len() != src.len() {
                return Err(parse(format!("parameter block has {} values, expected {}", src.len(), dst.len())));
            }
            dst.copy_from_slice(&src);
        }
        if !model.params.all_finite() {
            return Err(parse("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(path, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn feats(rows: Array2<f64>) -> FeatureSequence {
        FeatureSequence {
            id: "u".into(),
            frames: rows,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_model(4, 3, 5, 9).unwrap();
        assert_eq!(a, init_model(4, 3, 5, 9).unwrap());
        assert_ne!(a.params, init_model(4, 3, 5, 10).unwrap().params);
        assert!(init_model(0, 3, 0, 0).is_err());
        assert!(init_model(2, 0, 0, 0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let mut m = init_model(3, 3, 0, 1).unwrap();
        m.params = m.params.zeros_like();
        let out = m.forward(&feats(array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])).unwrap();
        for &v in out.logp.iter() {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_normalisation() {
        let m = init_model(2, 4, 3, 2).unwrap();
        let out = m.forward(&feats(array![[10.0, -7.0]])).unwrap();
        assert_eq!(out.logp.dim(), (1, 5));
        let lse = ctc::log_sum_exp(out.logp.row(0).as_slice().unwrap());
        assert!(lse.abs() < 1e-6);
        assert!(out.logp.iter().all(|&v| v <= 0.0));
        assert!(matches!(m.forward(&feats(array![[1.0, 2.0, 3.0]])), Err(Error::Shape(_))));
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            base_lr: 2.0,
            ..Default::default()
        };
        let n = 101;
        assert_eq!(lr_at(0, n, &cfg).unwrap(), 0.0);
        assert!((lr_at(5, n, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(30, n, &cfg).unwrap(), 2.0);
        assert!((lr_at(75, n, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lr_at(100, n, &cfg).unwrap(), 0.0);
        assert!(matches!(lr_at(101, n, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn bad_fractions_rejected() {
        let cfg = TrainConfig {
            warmup_frac: 0.7,
            hold_frac: 0.4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn infeasible_training_pair_names_the_utterance() {
        let m = init_model(1, 2, 0, 0).unwrap();
        let f = feats(array![[0.0], [1.0]]);
        let l = LabelSequence(vec![1, 1]);
        let err = train(
            &m,
            &[TrainExample {
                features: &f,
                labels: &l,
                weight: 1.0,
            }],
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("`u`"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = init_model(3, 4, 2, 77).unwrap();
        let text = m.to_checkpoint_string();
        let back = AcousticModel::from_checkpoint_str(Path::new("ck"), &text).unwrap();
        assert_eq!(m, back);
    }
}
