//! Pairwise reward model: `r = σ(head(encode(a, b)))` is the probability
//! that push `a` earns a higher CTR than push `b` for the same video.
//!
//! The reference encoder hashes character n-grams of both texts into one
//! `dimension`-sized space, with the segment id (0 for `a`, 1 for `b`)
//! mixed into every hash so that the two positions stay distinguishable.
//! A remote scorer can stand in for the whole model behind [`PairScorer`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{BackendConfig, GatewayError, HttpTransport};
use crate::hashing::{fnv1a64, fnv1a64_extend};
use crate::pairlab::PairSample;
use crate::text::normalize_text;

pub const STATE_VERSION: &str = "pushforge-rm/1";

/// Logits are clamped to this magnitude before σ and BCE.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid model state: {0}")]
    State(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("unsupported state version {0:?}")]
    Version(String),
    #[error("corrupt model state: {0}")]
    Format(String),
    #[error(transparent)]
    Remote(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashedNgramSpec {
    pub n_min: usize,
    pub n_max: usize,
    pub dimension: usize,
}

impl Default for HashedNgramSpec {
    fn default() -> Self {
        Self { n_min: 1, n_max: 3, dimension: 1 << 18 }
    }
}

impl HashedNgramSpec {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !self.dimension.is_power_of_two() || self.dimension > u32::MAX as usize {
            return Err(RewardError::State(format!("dimension {} is not a power of two", self.dimension)));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(RewardError::State("need 1 <= n_min <= n_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    HashedNgram(HashedNgramSpec),
    Remote(BackendConfig),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::HashedNgram(HashedNgramSpec::default())
    }
}

/// A sparse vector of logical length `dim`, entries sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }

    fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| dense[i as usize] * v).sum()
    }
}

/// Hashed signed character n-gram counts of both segments, L2-normalized.
pub fn encode_pair(spec: &HashedNgramSpec, text_a: &str, text_b: &str) -> FeatureVector {
    let mask = (spec.dimension - 1) as u64;
    let mut raw: Vec<(u32, f64)> = Vec::new();
    for (segment, text) in [(0u8, text_a), (1u8, text_b)] {
        let chars: Vec<char> = normalize_text(text).chars().collect();
        let seeded = fnv1a64(&[segment]);
        for n in spec.n_min..=spec.n_max {
            for gram in chars.windows(n) {
                let gram: String = gram.iter().collect();
                let h = fnv1a64_extend(seeded, gram.as_bytes());
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                raw.push(((h & mask) as u32, sign));
            }
        }
    }
    raw.sort_by_key(|&(i, _)| i);
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
    for (i, v) in raw {
        match entries.last_mut() {
            Some((j, acc)) if *j == i => *acc += v,
            _ => entries.push((i, v)),
        }
    }
    entries.retain(|&(_, v)| v != 0.0);
    let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in &mut entries {
            *v /= norm;
        }
    }
    FeatureVector { dim: spec.dimension, entries }
}

/// Dense parameter vector, stored on disk as its nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec(pub Vec<f64>);

#[derive(Serialize, Deserialize)]
struct SparseParams {
    len: usize,
    index: Vec<usize>,
    value: Vec<f64>,
}

impl Serialize for ParamVec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (index, value) = self.0.iter().enumerate().filter(|(_, v)| v.to_bits() != 0).map(|(i, &v)| (i, v)).unzip();
        SparseParams { len: self.0.len(), index, value }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamVec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let sp = SparseParams::deserialize(d)?;
        if sp.index.len() != sp.value.len() {
            return Err(D::Error::custom("index/value length mismatch"));
        }
        let mut out = vec![0.0; sp.len];
        for (i, v) in sp.index.into_iter().zip(sp.value) {
            *out.get_mut(i).ok_or_else(|| D::Error::custom("parameter index out of range"))? = v;
        }
        Ok(ParamVec(out))
    }
}

/// `Affine` is the depth-0 head `w·h + b`; `Mlp` is one ReLU hidden layer of
/// width `hidden` followed by a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardHead {
    Affine { weights: ParamVec, bias: f64 },
    Mlp { hidden: usize, w1: ParamVec, b1: Vec<f64>, w2: Vec<f64>, b2: f64 },
}

impl RewardHead {
    pub fn zeros(dim: usize) -> Self {
        RewardHead::Affine { weights: ParamVec(vec![0.0; dim]), bias: 0.0 }
    }

    /// Seeded small-uniform initialization of a one-hidden-layer head.
    pub fn random_mlp(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = (0..hidden * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let b1 = (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let w2 = (0..hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();
        RewardHead::Mlp { hidden, w1: ParamVec(w1), b1, w2, b2: 0.0 }
    }

    pub fn hidden_width(&self) -> usize {
        match self {
            RewardHead::Affine { .. } => 0,
            RewardHead::Mlp { hidden, .. } => *hidden,
        }
    }

    /// Input dimension implied by the parameters.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            RewardHead::Affine { weights, .. } => Some(weights.0.len()),
            RewardHead::Mlp { hidden, w1, b1, w2, .. } => {
                if *hidden == 0 || b1.len() != *hidden || w2.len() != *hidden || w1.0.len() % hidden != 0 {
                    None
                } else {
                    Some(w1.0.len() / hidden)
                }
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<(), RewardError> {
        match self.input_dim() {
            Some(d) if d == dim => Ok(()),
            Some(d) => Err(RewardError::State(format!("head expects dimension {d}, encoder produces {dim}"))),
            None => Err(RewardError::State("inconsistent head parameter shapes".into())),
        }
    }

    /// Pre-activations of the hidden layer (empty for the affine head).
    pub fn preactivations(&self, x: &FeatureVector) -> Vec<f64> {
        match self {
            RewardHead::Affine { .. } => Vec::new(),
            RewardHead::Mlp { w1, b1, .. } => {
                let d = x.len();
                b1.iter().enumerate().map(|(k, b)| b + x.dot(&w1.0[k * d..(k + 1) * d])).collect()
            }
        }
    }

    pub fn logit(&self, x: &FeatureVector) -> f64 {
        match self {
            RewardHead::Affine { weights, bias } => bias + x.dot(&weights.0),
            RewardHead::Mlp { w2, b2, .. } => {
                let a = self.preactivations(x);
                b2 + a.iter().zip(w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>()
            }
        }
    }

    /// Total number of scalar parameters, in the flat order
    /// `[weights, bias]` or `[w1 (row-major, hidden × dim), b1, w2, b2]`.
    pub fn n_params(&self) -> usize {
        match self {
            RewardHead::Affine { weights, .. } => weights.0.len() + 1,
            RewardHead::Mlp { w1, b1, w2, .. } => w1.0.len() + b1.len() + w2.len() + 1,
        }
    }

    pub fn param(&self, i: usize) -> f64 {
        match self {
            RewardHead::Affine { weights, bias } => weights.0.get(i).copied().unwrap_or(*bias),
            RewardHead::Mlp { w1, b1, w2, b2, .. } => {
                let (n1, h) = (w1.0.len(), b1.len());
                if i < n1 {
                    w1.0[i]
                } else if i < n1 + h {
                    b1[i - n1]
                } else if i < n1 + 2 * h {
                    w2[i - n1 - h]
                } else {
                    *b2
                }
            }
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        match self {
            RewardHead::Affine { weights, bias } => match weights.0.get_mut(i) {
                Some(w) => *w = v,
                None => *bias = v,
            },
            RewardHead::Mlp { w1, b1, w2, b2, .. } => {
                let (n1, h) = (w1.0.len(), b1.len());
                if i < n1 {
                    w1.0[i] = v
                } else if i < n1 + h {
                    b1[i - n1] = v
                } else if i < n1 + 2 * h {
                    w2[i - n1 - h] = v
                } else {
                    *b2 = v
                }
            }
        }
    }

    /// Whether parameter `i` is a weight (L2-penalized) rather than a bias.
    pub fn is_weight(&self, i: usize) -> bool {
        match self {
            RewardHead::Affine { weights, .. } => i < weights.0.len(),
            RewardHead::Mlp { w1, b1, w2, .. } => {
                let (n1, h) = (w1.0.len(), b1.len());
                i < n1 || (i >= n1 + h && i < n1 + h + w2.len())
            }
        }
    }

    fn penalty(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|w| w * w).sum::<f64>();
        match self {
            RewardHead::Affine { weights, .. } => sq(&weights.0),
            RewardHead::Mlp { w1, w2, .. } => sq(&w1.0) + sq(w2),
        }
    }

    /// Adds `scale * dL/dθ` for one example into `grad`, where `dlogit` is
    /// dL/dz.
    fn accumulate(&self, x: &FeatureVector, dlogit: f64, grad: &mut GradBuffer) {
        match self {
            RewardHead::Affine { weights, .. } => {
                for &(i, v) in x.entries() {
                    grad.add(i as usize, dlogit * v);
                }
                grad.add(weights.0.len(), dlogit);
            }
            RewardHead::Mlp { w1, b1, w2, .. } => {
                let d = x.len();
                let (n1, h) = (w1.0.len(), b1.len());
                let a = self.preactivations(x);
                for k in 0..h {
                    grad.add(n1 + h + k, dlogit * a[k].max(0.0));
                    if a[k] > 0.0 {
                        let da = dlogit * w2[k];
                        for &(i, v) in x.entries() {
                            grad.add(k * d + i as usize, da * v);
                        }
                        grad.add(n1 + k, da);
                    }
                }
                grad.add(n1 + 2 * h, dlogit);
            }
        }
    }
}

/// Dense gradient accumulator that remembers which slots were written.
struct GradBuffer {
    values: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
}

impl GradBuffer {
    fn new(n: usize) -> Self {
        Self { values: vec![0.0; n], touched: Vec::new(), marked: vec![false; n] }
    }

    fn add(&mut self, i: usize, v: f64) {
        if !self.marked[i] {
            self.marked[i] = true;
            self.touched.push(i);
        }
        self.values[i] += v;
    }

    fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i] = 0.0;
            self.marked[i] = false;
        }
        self.touched.clear();
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// BCE of `σ(z)` against `label`, computed stably from the clamped logit.
pub fn bce_from_logit(z: f64, label: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - label * z
}

/// dBCE/dz, zero where the clamp is active.
pub fn bce_logit_grad(z: f64, label: f64) -> f64 {
    if z.abs() >= LOGIT_CLAMP {
        0.0
    } else {
        sigmoid(z) - label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Also train every pair as `(b, a)` with the flipped label.
    pub order_augment: bool,
    /// Stop after this many epochs without eval-loss improvement.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            l2: 0.0,
            seed: 0,
            order_augment: true,
            early_stop_patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_train_loss: Option<f64>,
    pub final_eval_loss: Option<f64>,
}

/// Everything needed to score pairs; serialized by [`save_state`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModelState {
    pub encoder: EncoderSpec,
    pub head: RewardHead,
    pub metadata: TrainMetadata,
}

impl RewardModelState {
    /// Zero affine head for `hidden == 0`, otherwise a seeded random MLP.
    pub fn new(spec: HashedNgramSpec, hidden: usize, seed: u64) -> Result<Self, RewardError> {
        spec.validate()?;
        let head = if hidden == 0 {
            RewardHead::zeros(spec.dimension)
        } else {
            RewardHead::random_mlp(spec.dimension, hidden, seed)
        };
        Ok(Self {
            encoder: EncoderSpec::HashedNgram(spec),
            head,
            metadata: TrainMetadata { seed, epochs_run: 0, final_train_loss: None, final_eval_loss: None },
        })
    }

    /// A state that forwards every prediction to a remote scorer.
    pub fn remote(cfg: BackendConfig) -> Self {
        Self {
            encoder: EncoderSpec::Remote(cfg),
            head: RewardHead::zeros(0),
            metadata: TrainMetadata { seed: 0, epochs_run: 0, final_train_loss: None, final_eval_loss: None },
        }
    }

    fn hashed_spec(&self) -> Result<&HashedNgramSpec, RewardError> {
        match &self.encoder {
            EncoderSpec::HashedNgram(spec) => Ok(spec),
            EncoderSpec::Remote(_) => Err(RewardError::State("state uses a remote encoder".into())),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        match &self.encoder {
            EncoderSpec::HashedNgram(spec) => {
                spec.validate()?;
                self.head.check_dim(spec.dimension)
            }
            EncoderSpec::Remote(cfg) => cfg.validate().map_err(RewardError::from),
        }
    }

    pub fn logit(&self, text_a: &str, text_b: &str) -> Result<f64, RewardError> {
        let spec = self.hashed_spec()?;
        self.head.check_dim(spec.dimension)?;
        Ok(self.head.logit(&encode_pair(spec, text_a, text_b)))
    }
}

/// Probability that `text_a` outperforms `text_b`.
pub fn predict(state: &RewardModelState, text_a: &str, text_b: &str) -> Result<f64, RewardError> {
    match &state.encoder {
        EncoderSpec::Remote(cfg) => remote_score(cfg, text_a, text_b),
        EncoderSpec::HashedNgram(_) => {
            let z = state.logit(text_a, text_b)?;
            Ok(sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
        }
    }
}

/// Anything that maps an ordered pair of pushes to P(first wins).
pub trait PairScorer: Sync {
    fn score(&self, text_a: &str, text_b: &str) -> Result<f64, RewardError>;
}

impl PairScorer for RewardModelState {
    fn score(&self, text_a: &str, text_b: &str) -> Result<f64, RewardError> {
        predict(self, text_a, text_b)
    }
}

/// Adapts a closure into a [`PairScorer`].
pub struct FnScorer<F>(pub F);

impl<F> PairScorer for FnScorer<F>
where
    F: Fn(&str, &str) -> f64 + Sync,
{
    fn score(&self, text_a: &str, text_b: &str) -> Result<f64, RewardError> {
        Ok((self.0)(text_a, text_b))
    }
}

/// HTTP client for a `/score_pair` endpoint.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    transport: HttpTransport,
}

impl RemoteScorer {
    pub fn new(cfg: BackendConfig) -> Result<Self, RewardError> {
        Ok(Self { transport: HttpTransport::new(cfg)? })
    }
}

impl PairScorer for RemoteScorer {
    fn score(&self, text_a: &str, text_b: &str) -> Result<f64, RewardError> {
        let reply = self.transport.post_json("score_pair", &json!({ "text_a": text_a, "text_b": text_b }))?;
        let r = reply
            .get("r")
            .and_then(Value::as_f64)
            .ok_or_else(|| GatewayError::Protocol("response has no numeric field r".into()))?;
        if !(r > 0.0 && r < 1.0) {
            return Err(GatewayError::Protocol(format!("score {r} outside (0, 1)")).into());
        }
        Ok(r)
    }
}

/// One-shot remote scoring.
pub fn remote_score(cfg: &BackendConfig, text_a: &str, text_b: &str) -> Result<f64, RewardError> {
    RemoteScorer::new(cfg.clone())?.score(text_a, text_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean BCE plus the L2 term over the (augmented) training set.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

struct Example {
    x: FeatureVector,
    y: f64,
}

fn encode_examples(spec: &HashedNgramSpec, pairs: &[PairSample], augment: bool) -> Vec<Example> {
    let mut out = Vec::with_capacity(pairs.len() * (1 + augment as usize));
    for p in pairs {
        let y = f64::from(p.label);
        out.push(Example { x: encode_pair(spec, &p.text_a, &p.text_b), y });
        if augment {
            out.push(Example { x: encode_pair(spec, &p.text_b, &p.text_a), y: 1.0 - y });
        }
    }
    out
}

/// A prediction is correct iff it falls strictly on the label's side of 0.5.
pub fn is_correct(r: f64, label: u8) -> bool {
    (label == 1 && r > 0.5) || (label == 0 && r < 0.5)
}

/// (mean BCE, accuracy) over examples.
fn evaluate(head: &RewardHead, examples: &[Example]) -> (f64, f64) {
    if examples.is_empty() {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in examples {
        let z = head.logit(&e.x);
        loss += bce_from_logit(z, e.y);
        let r = sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        correct += is_correct(r, e.y as u8) as usize;
    }
    let n = examples.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Mini-batch gradient descent on mean BCE + `l2/2 · ‖weights‖²`.
/// Biases are not penalized. Deterministic for a fixed config.
pub fn train(
    init: &RewardModelState,
    train_pairs: &[PairSample],
    eval_pairs: &[PairSample],
    cfg: &TrainConfig,
) -> Result<(RewardModelState, Vec<EpochStats>), RewardError> {
    if train_pairs.is_empty() {
        return Err(RewardError::Usage("empty training set".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 || !(cfg.l2 >= 0.0) {
        return Err(RewardError::Usage("need learning_rate > 0, batch_size >= 1, l2 >= 0".into()));
    }
    init.validate()?;
    let spec = init.hashed_spec()?.clone();
    let mut state = init.clone();
    if cfg.epochs == 0 {
        return Ok((state, Vec::new()));
    }

    let train_ex = encode_examples(&spec, train_pairs, cfg.order_augment);
    let eval_ex = encode_examples(&spec, eval_pairs, false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let n_params = state.head.n_params();
    let weight_slots: Vec<usize> = (0..n_params).filter(|&i| state.head.is_weight(i)).collect();
    let mut grad = GradBuffer::new(n_params);
    let mut trace = Vec::new();
    let mut best_eval = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let e = &train_ex[i];
                let dz = bce_logit_grad(state.head.logit(&e.x), e.y);
                state.head.accumulate(&e.x, dz, &mut grad);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            if cfg.l2 > 0.0 {
                let decay = 1.0 - cfg.learning_rate * cfg.l2;
                for &i in &weight_slots {
                    let v = state.head.param(i);
                    state.head.set_param(i, v * decay);
                }
            }
            for &i in &grad.touched {
                let v = state.head.param(i);
                state.head.set_param(i, v - step * grad.values[i]);
            }
            grad.clear();
        }

        let (data_loss, train_acc) = evaluate(&state.head, &train_ex);
        let train_loss = data_loss + 0.5 * cfg.l2 * state.head.penalty();
        if !train_loss.is_finite() {
            return Err(RewardError::Divergence { epoch });
        }
        let (eval_loss, eval_acc) = if eval_ex.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&state.head, &eval_ex);
            (Some(l), Some(a))
        };
        trace.push(EpochStats { epoch, train_loss, train_accuracy: train_acc, eval_loss, eval_accuracy: eval_acc });
        state.metadata.epochs_run = epoch;
        state.metadata.final_train_loss = Some(train_loss);
        state.metadata.final_eval_loss = eval_loss;

        if let (Some(patience), Some(l)) = (cfg.early_stop_patience, eval_loss) {
            if l < best_eval {
                best_eval = l;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    state.metadata.seed = cfg.seed;
    Ok((state, trace))
}

/// Training objective on a single labeled pair: BCE + `l2/2 · ‖weights‖²`.
pub fn pair_objective(
    state: &RewardModelState,
    text_a: &str,
    text_b: &str,
    label: u8,
    l2: f64,
) -> Result<f64, RewardError> {
    let z = state.logit(text_a, text_b)?;
    Ok(bce_from_logit(z, f64::from(label)) + 0.5 * l2 * state.head.penalty())
}

/// Analytic gradient of [`pair_objective`] over every parameter, in the
/// head's flat order.
pub fn pair_gradient(
    state: &RewardModelState,
    text_a: &str,
    text_b: &str,
    label: u8,
    l2: f64,
) -> Result<Vec<f64>, RewardError> {
    let spec = state.hashed_spec()?;
    state.head.check_dim(spec.dimension)?;
    let x = encode_pair(spec, text_a, text_b);
    let dz = bce_logit_grad(state.head.logit(&x), f64::from(label));
    let mut buf = GradBuffer::new(state.head.n_params());
    state.head.accumulate(&x, dz, &mut buf);
    let mut g = buf.values;
    if l2 > 0.0 {
        for (i, gi) in g.iter_mut().enumerate() {
            if state.head.is_weight(i) {
                *gi += l2 * state.head.param(i);
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub l2: f64,
    /// Parameters sampled among those the pair actually reaches, plus the
    /// same number sampled uniformly.
    pub n_params: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, l2: 0.0, n_params: 200, seed: 0 }
    }
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-8)` between the
/// analytic gradient and central finite differences of the objective.
pub fn gradient_check(
    state: &RewardModelState,
    text_a: &str,
    text_b: &str,
    label: u8,
    cfg: &GradCheckConfig,
) -> Result<f64, RewardError> {
    let spec = state.hashed_spec()?;
    let x = encode_pair(spec, text_a, text_b);
    let z0 = state.head.logit(&x);
    if !bce_from_logit(z0, f64::from(label)).is_finite() {
        return Err(RewardError::Usage("loss is not finite at this state".into()));
    }
    let analytic = pair_gradient(state, text_a, text_b, label, cfg.l2)?;
    let n = state.head.n_params();

    let mut reached = GradBuffer::new(n);
    state.head.accumulate(&x, 1.0, &mut reached);
    let mut reached: Vec<usize> = reached.touched;
    if let RewardHead::Mlp { w1, b1, .. } = &state.head {
        // Gated-off hidden units still own parameters worth probing.
        let (d, h) = (x.len(), b1.len());
        for k in 0..h {
            reached.extend(x.entries().iter().map(|&(i, _)| k * d + i as usize));
            reached.push(w1.0.len() + k);
        }
    }
    reached.sort_unstable();
    reached.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    reached.shuffle(&mut rng);
    let mut probe: Vec<usize> = reached.into_iter().take(cfg.n_params).collect();
    probe.extend((0..cfg.n_params).map(|_| rng.gen_range(0..n)));
    probe.sort_unstable();
    probe.dedup();

    let label_f = f64::from(label);
    let mut head = state.head.clone();
    let mut worst = 0.0f64;
    for &i in &probe {
        let orig = head.param(i);
        // Penalties of the other parameters cancel in the difference.
        let objective = |head: &RewardHead, v: f64| {
            let pen = if head.is_weight(i) { 0.5 * cfg.l2 * v * v } else { 0.0 };
            bce_from_logit(head.logit(&x), label_f) + pen
        };
        head.set_param(i, orig + cfg.epsilon);
        let up = objective(&head, orig + cfg.epsilon);
        head.set_param(i, orig - cfg.epsilon);
        let down = objective(&head, orig - cfg.epsilon);
        head.set_param(i, orig);
        let numeric = (up - down) / (2.0 * cfg.epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: String,
    encoder: EncoderSpec,
    head: RewardHead,
    metadata: TrainMetadata,
}

/// Versioned JSON; floats use shortest round-trip decimals.
pub fn save_state(state: &RewardModelState) -> Vec<u8> {
    let file = StateFile {
        version: STATE_VERSION.to_string(),
        encoder: state.encoder.clone(),
        head: state.head.clone(),
        metadata: state.metadata.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("state serializes");
    out.push(b'\n');
    out
}

pub fn load_state(bytes: &[u8]) -> Result<RewardModelState, RewardError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| RewardError::Format(e.to_string()))?;
    match value.get("version").and_then(Value::as_str) {
        Some(STATE_VERSION) => {}
        Some(other) => return Err(RewardError::Version(other.to_string())),
        None => return Err(RewardError::Format("missing version".into())),
    }
    let file: StateFile = serde_json::from_value(value).map_err(|e| RewardError::Format(e.to_string()))?;
    let state = RewardModelState { encoder: file.encoder, head: file.head, metadata: file.metadata };
    state.validate().map_err(|e| RewardError::Format(e.to_string()))?;
    Ok(state)
}
