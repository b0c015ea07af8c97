//! Twin bidirectional-LSTM encoder producing softmax hash codes.
//!
//! The left tower encodes a segment as predecessor context, the right tower
//! encodes the following segment as successor identity. Training pulls the
//! two codes of every adjacent pair together with a symmetrized,
//! stop-gradient cross-entropy and (optionally) pushes the batch-mean code
//! towards uniform so the buckets do not collapse onto one address.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    adam_step, cross_entropy, cross_entropy_grad_q, sgd_step, softmax, softmax_backward, AdamState, DenseParams,
    LstmCache, LstmParams, NnError, Params, StepInput,
};
use crate::score::{Corpus, Segment};

pub const CHECKPOINT_VERSION: &str = "nbase-checkpoint-v1";

#[derive(Debug, Error)]
pub enum TwinError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("segment has {found} tokens, model expects {expected}")]
    SegmentLength { expected: usize, found: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training pairs")]
    NoPairs,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint version {0:?} is not supported")]
    Version(String),
    #[error("vocabulary fingerprint mismatch: model has {model}, corpus has {corpus}")]
    Fingerprint { model: String, corpus: String },
    #[error("malformed checkpoint: {0}")]
    Shape(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TwinError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "T")]
    pub segment_length: usize,
    pub h: usize,
    pub d: usize,
    #[serde(rename = "H")]
    pub buckets: usize,
    /// LSTM layers per direction.
    #[serde(default = "one")]
    pub layers: usize,
}

fn one() -> usize {
    1
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.segment_length == 0 || self.h == 0 || self.d == 0 || self.layers == 0 {
            return Err(TwinError::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.buckets < 2 {
            return Err(TwinError::Config("at least two hash buckets are required".into()));
        }
        Ok(())
    }
}

/// One encoder: forward and backward LSTM stacks, a tanh hidden layer over
/// the concatenated final states, and a linear layer into bucket logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerParams {
    pub forward: Vec<LstmParams>,
    pub backward: Vec<LstmParams>,
    pub hidden: DenseParams,
    pub output: DenseParams,
}

impl Params for TowerParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.forward.slices();
        s.extend(self.backward.slices());
        s.extend(self.hidden.slices());
        s.extend(self.output.slices());
        s
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.forward.slices_mut();
        s.extend(self.backward.slices_mut());
        s.extend(self.hidden.slices_mut());
        s.extend(self.output.slices_mut());
        s
    }
}

fn zero_stack(dims: &Dims) -> Vec<LstmParams> {
    (0..dims.layers)
        .map(|l| LstmParams::zeros(if l == 0 { dims.vocab } else { dims.h }, dims.h))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TowerCache {
    forward: Vec<LstmCache>,
    backward: Vec<LstmCache>,
    concat: Vec<f64>,
    activation: Vec<f64>,
    /// Output distribution.
    pub probs: Vec<f64>,
}

fn run_stack(stack: &[LstmParams], ids: impl Iterator<Item = u32>) -> Result<(Vec<f64>, Vec<LstmCache>)> {
    let mut inputs: Vec<StepInput> = ids.map(|id| StepInput::OneHot(id as usize)).collect();
    let mut caches = Vec::with_capacity(stack.len());
    let mut last = Vec::new();
    for layer in stack {
        let (hs, cache) = layer.forward(&inputs)?;
        caches.push(cache);
        last = hs.last().cloned().unwrap_or_else(|| vec![0.0; layer.hidden_dim()]);
        inputs = hs.into_iter().map(StepInput::Dense).collect();
    }
    Ok((last, caches))
}

fn back_stack(stack: &[LstmParams], caches: &[LstmCache], steps: usize, d_final: &[f64], grads: &mut [LstmParams]) {
    if steps == 0 {
        return;
    }
    let h = d_final.len();
    let mut dh = vec![vec![0.0; h]; steps];
    dh[steps - 1] = d_final.to_vec();
    for l in (0..stack.len()).rev() {
        let dxs = stack[l].backward(&caches[l], &dh, &mut grads[l]);
        if l > 0 {
            dh = dxs;
        }
    }
}

impl TowerParams {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            forward: zero_stack(dims),
            backward: zero_stack(dims),
            hidden: DenseParams::zeros(2 * dims.h, dims.d),
            output: DenseParams::zeros(dims.d, dims.buckets),
        }
    }

    pub fn buckets(&self) -> usize {
        self.output.output_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.forward.first().map_or(0, LstmParams::input_dim)
    }

    pub fn forward_cached(&self, ids: &[u32]) -> Result<TowerCache> {
        let v = self.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(TwinError::TokenOutOfRange { id, size: v });
        }
        let (hf, forward) = run_stack(&self.forward, ids.iter().copied())?;
        let (hb, backward) = run_stack(&self.backward, ids.iter().rev().copied())?;
        let concat = [hf, hb].concat();
        let activation: Vec<f64> = self.hidden.forward(&concat).into_iter().map(f64::tanh).collect();
        let probs = softmax(&self.output.forward(&activation));
        Ok(TowerCache { forward, backward, concat, activation, probs })
    }

    /// Accumulates gradients given `dL/dprobs`.
    pub fn backward(&self, cache: &TowerCache, d_probs: &[f64], grads: &mut TowerParams) {
        let d_logits = softmax_backward(&cache.probs, d_probs);
        let d_act = self.output.backward(&cache.activation, &d_logits, &mut grads.output);
        let d_pre: Vec<f64> = d_act.iter().zip(&cache.activation).map(|(d, a)| d * (1.0 - a * a)).collect();
        let d_concat = self.hidden.backward(&cache.concat, &d_pre, &mut grads.hidden);
        let h = d_concat.len() / 2;
        let steps = cache_len(&cache.forward);
        back_stack(&self.forward, &cache.forward, steps, &d_concat[..h], &mut grads.forward);
        back_stack(&self.backward, &cache.backward, steps, &d_concat[h..], &mut grads.backward);
    }
}

fn cache_len(caches: &[LstmCache]) -> usize {
    caches.first().map_or(0, LstmCache::len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    pub dims: Dims,
    pub vocab_fingerprint: String,
    pub left: TowerParams,
    pub right: TowerParams,
}

impl Params for TwinModel {
    fn slices(&self) -> Vec<&[f64]> {
        let mut s = self.left.slices();
        s.extend(self.right.slices());
        s
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.left.slices_mut();
        s.extend(self.right.slices_mut());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl TwinModel {
    pub fn zeros(dims: Dims, vocab_fingerprint: impl Into<String>) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            vocab_fingerprint: vocab_fingerprint.into(),
            left: TowerParams::zeros(&dims),
            right: TowerParams::zeros(&dims),
        })
    }

    /// Every weight drawn uniformly from `[-scale, scale]`, left tower first.
    pub fn init_uniform(dims: Dims, vocab_fingerprint: impl Into<String>, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(dims, vocab_fingerprint)?;
        if scale > 0.0 {
            m.fill_with(|| rng.gen_range(-scale..=scale));
        }
        Ok(m)
    }

    pub fn tower(&self, side: Side) -> &TowerParams {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    fn check_segment(&self, ids: &[u32]) -> Result<()> {
        if ids.len() != self.dims.segment_length {
            return Err(TwinError::SegmentLength { expected: self.dims.segment_length, found: ids.len() });
        }
        Ok(())
    }

    /// Softmax hash code of a segment under one tower.
    pub fn encode(&self, side: Side, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_segment(ids)?;
        Ok(self.tower(side).forward_cached(ids)?.probs)
    }

    pub fn check_fingerprint(&self, corpus_fingerprint: &str) -> Result<()> {
        if self.vocab_fingerprint != corpus_fingerprint {
            return Err(TwinError::Fingerprint {
                model: self.vocab_fingerprint.clone(),
                corpus: corpus_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Towers exchanged; used to check the symmetry of the pair loss.
    pub fn swapped(&self) -> Self {
        Self { left: self.right.clone(), right: self.left.clone(), ..self.clone() }
    }
}

/// `½·[CE(p_L(a), p_R(b)) + CE(p_R(b), p_L(a))]`, each target held fixed.
pub fn pair_loss(model: &TwinModel, a: &[u32], b: &[u32]) -> Result<f64> {
    let pl = model.encode(Side::Left, a)?;
    let pr = model.encode(Side::Right, b)?;
    symmetric_ce(&pl, &pr)
}

fn symmetric_ce(pl: &[f64], pr: &[f64]) -> Result<f64> {
    Ok(0.5 * (cross_entropy(pl, pr)? + cross_entropy(pr, pl)?))
}

fn mean_distribution(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists.first().ok_or(TwinError::EmptyBatch)?;
    let mut mean = vec![0.0; first.len()];
    for d in dists {
        if d.len() != mean.len() {
            return Err(NnError::Dimension("distributions of unequal length".into()).into());
        }
        for (m, x) in mean.iter_mut().zip(d) {
            *m += x;
        }
    }
    let n = dists.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `KL(mean ‖ uniform) = ln H − entropy(mean)`; zero iff the batch mean is uniform.
pub fn batch_uniformity(dists: &[Vec<f64>]) -> Result<f64> {
    let mean = mean_distribution(dists)?;
    let neg_entropy = mean.iter().filter(|&&m| m > 0.0).fold(0.0, |acc, &m| acc + m * m.ln());
    Ok(((mean.len() as f64).ln() + neg_entropy).max(0.0))
}

/// Gradient of [`batch_uniformity`] with respect to each member (all equal).
fn batch_uniformity_grad(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mean = mean_distribution(dists)?;
    let n = dists.len() as f64;
    Ok(mean.iter().map(|&m| if m > 0.0 { (m.ln() + 1.0) / n } else { 0.0 }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Mean pair loss over the batch.
    pub base: f64,
    /// Mean of the left- and right-tower batch uniformity terms.
    pub uniformity: f64,
    pub total: f64,
}

pub type Pair<'a> = (&'a [u32], &'a [u32]);

struct BatchForward {
    left: Vec<TowerCache>,
    right: Vec<TowerCache>,
}

fn forward_batch(model: &TwinModel, batch: &[Pair<'_>]) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(TwinError::EmptyBatch);
    }
    let mut left = Vec::with_capacity(batch.len());
    let mut right = Vec::with_capacity(batch.len());
    for (a, b) in batch {
        model.check_segment(a)?;
        model.check_segment(b)?;
        left.push(model.left.forward_cached(a)?);
        right.push(model.right.forward_cached(b)?);
    }
    Ok(BatchForward { left, right })
}

fn probs(caches: &[TowerCache]) -> Vec<Vec<f64>> {
    caches.iter().map(|c| c.probs.clone()).collect()
}

fn objective_from(
    left: &[Vec<f64>],
    right: &[Vec<f64>],
    targets: &[(Vec<f64>, Vec<f64>)],
    lambda: f64,
) -> Result<Objective> {
    let n = left.len() as f64;
    let mut base = 0.0;
    for ((pl, pr), (tl, tr)) in left.iter().zip(right).zip(targets) {
        base += 0.5 * (cross_entropy(tl, pr)? + cross_entropy(tr, pl)?);
    }
    base /= n;
    let uniformity = 0.5 * (batch_uniformity(left)? + batch_uniformity(right)?);
    Ok(Objective { base, uniformity, total: base + lambda * uniformity })
}

/// Batch objective `mean(pair_loss) + λ·uniformity`.
pub fn objective(model: &TwinModel, batch: &[Pair<'_>], lambda: f64) -> Result<Objective> {
    let fwd = forward_batch(model, batch)?;
    let (l, r) = (probs(&fwd.left), probs(&fwd.right));
    let targets: Vec<_> = l.iter().cloned().zip(r.iter().cloned()).collect();
    objective_from(&l, &r, &targets, lambda)
}

/// The objective with the cross-entropy targets pinned to externally
/// supplied codes `(p_L(a), p_R(b))` instead of the model's live outputs.
///
/// At the parameters that produced `targets` its true gradient coincides with
/// the stop-gradient gradient from [`gradients`], which makes it the function
/// to differentiate numerically when checking them.
pub fn objective_with_targets(
    model: &TwinModel,
    batch: &[Pair<'_>],
    lambda: f64,
    targets: &[(Vec<f64>, Vec<f64>)],
) -> Result<Objective> {
    if targets.len() != batch.len() {
        return Err(TwinError::Config("one target pair per batch member".into()));
    }
    let fwd = forward_batch(model, batch)?;
    objective_from(&probs(&fwd.left), &probs(&fwd.right), targets, lambda)
}

/// Current codes `(p_L(a), p_R(b))` for every pair.
pub fn batch_codes(model: &TwinModel, batch: &[Pair<'_>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let fwd = forward_batch(model, batch)?;
    Ok(fwd.left.into_iter().zip(fwd.right).map(|(l, r)| (l.probs, r.probs)).collect())
}

/// Objective and its reverse-mode gradient; targets are gradient-blocked.
/// Member gradients accumulate in batch order.
pub fn gradients(model: &TwinModel, batch: &[Pair<'_>], lambda: f64) -> Result<(Objective, TwinModel)> {
    let fwd = forward_batch(model, batch)?;
    let (l, r) = (probs(&fwd.left), probs(&fwd.right));
    let targets: Vec<_> = l.iter().cloned().zip(r.iter().cloned()).collect();
    let obj = objective_from(&l, &r, &targets, lambda)?;

    let n = batch.len() as f64;
    let reg_l = batch_uniformity_grad(&l)?;
    let reg_r = batch_uniformity_grad(&r)?;
    let mut grads = model.zeros_like();
    for k in 0..batch.len() {
        // d/dp_R of ½·CE(p_L, p_R)/n, plus the uniformity share
        let mut d_r = cross_entropy_grad_q(&l[k], &r[k]);
        let mut d_l = cross_entropy_grad_q(&r[k], &l[k]);
        for (d, g) in d_r.iter_mut().zip(&reg_r) {
            *d = 0.5 * *d / n + lambda * 0.5 * g;
        }
        for (d, g) in d_l.iter_mut().zip(&reg_l) {
            *d = 0.5 * *d / n + lambda * 0.5 * g;
        }
        model.left.backward(&fwd.left[k], &d_l, &mut grads.left);
        model.right.backward(&fwd.right[k], &d_r, &mut grads.right);
    }
    Ok((obj, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// λ_u: weight of the batch uniformity term; 0 gives the bare pair loss.
    pub uniformity_weight: f64,
    pub seed: u64,
    pub h: usize,
    pub d: usize,
    #[serde(rename = "H")]
    pub buckets: usize,
    pub layers: usize,
    pub init_scale: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            uniformity_weight: 1.0,
            seed: 42,
            h: 64,
            d: 64,
            buckets: 64,
            layers: 1,
            init_scale: 0.08,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TwinError::Config("epochs and batch_size must be at least 1".into()));
        }
        // written so NaN fails every test
        let ok = self.uniformity_weight >= 0.0 && self.lr > 0.0 && self.init_scale >= 0.0;
        if !ok {
            return Err(TwinError::Config("lr must be positive; uniformity_weight and init_scale non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub base_loss: f64,
    pub uniformity: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_base_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.base_loss)
    }
}

/// Trains a fresh model on adjacent pairs.
///
/// Parameters are drawn from the seeded generator first; the same generator
/// then shuffles the pair order at the start of every epoch.
pub fn train(
    pairs: &[Pair<'_>],
    vocab_size: usize,
    segment_length: usize,
    vocab_fingerprint: &str,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(TwinModel, TrainHistory)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TwinError::NoPairs);
    }
    let dims = Dims { vocab: vocab_size, segment_length, h: config.h, d: config.d, buckets: config.buckets, layers: config.layers };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TwinModel::init_uniform(dims, vocab_fingerprint, config.init_scale, &mut rng)?;
    let mut adam = AdamState::new(&model);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut base_sum, mut reg_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Pair<'_>> = chunk.iter().map(|&i| pairs[i]).collect();
            let (obj, grads) = gradients(&model, &batch, config.uniformity_weight)?;
            match config.optimizer {
                Optimizer::Adam => adam_step(&mut model, &grads, &mut adam, config.lr)?,
                Optimizer::Sgd => sgd_step(&mut model, &grads, config.lr)?,
            }
            base_sum += obj.base * batch.len() as f64;
            reg_sum += obj.uniformity;
            batches += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            base_loss: base_sum / pairs.len() as f64,
            uniformity: reg_sum / batches as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((model, history))
}

/// Trains on the adjacent pairs of one composer's pieces.
pub fn train_on_composer(
    corpus: &Corpus,
    composer: &str,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(TwinModel, TrainHistory)> {
    let pairs = corpus.training_pairs(composer);
    let pairs: Vec<Pair<'_>> = pairs.iter().map(|(a, b): &(Segment<'_>, Segment<'_>)| (a.token_ids, b.token_ids)).collect();
    train(&pairs, corpus.vocab.len(), corpus.segment_length(), &corpus.vocab_fingerprint(), config, on_epoch)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    version: String,
    dims: Dims,
    vocab_fingerprint: String,
    left: TowerParams,
    right: TowerParams,
}

pub fn save_checkpoint(model: &TwinModel) -> Vec<u8> {
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION.to_string(),
        dims: model.dims,
        vocab_fingerprint: model.vocab_fingerprint.clone(),
        left: model.left.clone(),
        right: model.right.clone(),
    };
    serde_json::to_vec(&doc).expect("checkpoint serializes")
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<TwinModel> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_VERSION) => {}
        other => return Err(TwinError::Version(other.unwrap_or("<missing>").to_string())),
    }
    let doc: CheckpointDoc = serde_json::from_value(value)?;
    doc.dims.validate()?;
    let expected = TowerParams::zeros(&doc.dims);
    for (name, tower) in [("left", &doc.left), ("right", &doc.right)] {
        if !same_shape(&expected, tower) {
            return Err(TwinError::Shape(format!("{name} tower does not match dims {:?}", doc.dims)));
        }
    }
    Ok(TwinModel { dims: doc.dims, vocab_fingerprint: doc.vocab_fingerprint, left: doc.left, right: doc.right })
}

fn same_shape(a: &TowerParams, b: &TowerParams) -> bool {
    let shape = |t: &TowerParams| {
        let mut s: Vec<(usize, usize)> = Vec::new();
        for l in t.forward.iter().chain(&t.backward) {
            s.extend([(l.w_x.rows(), l.w_x.cols()), (l.w_h.rows(), l.w_h.cols()), (l.b.len(), 1)]);
        }
        for d in [&t.hidden, &t.output] {
            s.extend([(d.w.rows(), d.w.cols()), (d.b.len(), 1)]);
        }
        (t.forward.len(), t.backward.len(), s)
    };
    shape(a) == shape(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, richardson_gradient};

    fn dims(v: usize, t: usize, h: usize, d: usize, buckets: usize) -> Dims {
        Dims { vocab: v, segment_length: t, h, d, buckets, layers: 1 }
    }

    fn random_model(dims: Dims, seed: u64, scale: f64) -> TwinModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TwinModel::init_uniform(dims, "fp", scale, &mut rng).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = TwinModel::zeros(dims(5, 3, 2, 2, 4), "fp").unwrap();
        assert_eq!(m.encode(Side::Left, &[1, 2, 3]).unwrap(), vec![0.25; 4]);
        assert_eq!(m.encode(Side::Right, &[0, 0, 4]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn encode_validates_input() {
        let m = TwinModel::zeros(dims(5, 3, 2, 2, 4), "fp").unwrap();
        assert!(matches!(m.encode(Side::Left, &[1, 2]), Err(TwinError::SegmentLength { .. })));
        assert!(matches!(m.encode(Side::Left, &[1, 2, 5]), Err(TwinError::TokenOutOfRange { id: 5, .. })));
        assert!(TwinModel::zeros(dims(5, 3, 2, 2, 1), "fp").is_err());
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Hand-stepped scalar evaluation of one tower (single layer).
    fn naive_tower(t: &TowerParams, ids: &[u32]) -> Vec<f64> {
        let run = |p: &LstmParams, seq: Vec<u32>| {
            let h = p.hidden_dim();
            let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
            for id in seq {
                let mut nh = vec![0.0; h];
                for j in 0..h {
                    let pre = |blk: usize| {
                        let r = blk * h + j;
                        p.b[r] + p.w_x.get(r, id as usize) + (0..h).map(|k| p.w_h.get(r, k) * hs[k]).sum::<f64>()
                    };
                    let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                    cs[j] = f * cs[j] + i * g;
                    nh[j] = o * cs[j].tanh();
                }
                hs = nh;
            }
            hs
        };
        let mut c = run(&t.forward[0], ids.to_vec());
        c.extend(run(&t.backward[0], ids.iter().rev().copied().collect()));
        let a: Vec<f64> = (0..t.hidden.output_dim())
            .map(|r| (t.hidden.b[r] + (0..c.len()).map(|k| t.hidden.w.get(r, k) * c[k]).sum::<f64>()).tanh())
            .collect();
        let z: Vec<f64> = (0..t.output.output_dim())
            .map(|r| t.output.b[r] + (0..a.len()).map(|k| t.output.w.get(r, k) * a[k]).sum::<f64>())
            .collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn toy_tower_matches_hand_stepped_oracle() {
        let m = random_model(dims(3, 2, 2, 2, 2), 5, 0.7);
        for side in [Side::Left, Side::Right] {
            let got = m.encode(side, &[2, 0]).unwrap();
            let want = naive_tower(m.tower(side), &[2, 0]);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-14);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_loss_examples() {
        assert!(symmetric_ce(&[0.0, 1.0], &[0.0, 1.0]).unwrap().abs() < 1e-300);
        // ½(CE([1,0],[.5,.5]) + CE([.5,.5],[1,0])) with the 1e-12 floor
        let got = symmetric_ce(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        let want = 0.5 * (2f64.ln() + 0.5 * -(1e-12f64).ln());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn pair_loss_swap_symmetry() {
        let m = random_model(dims(6, 4, 3, 3, 4), 9, 0.5);
        let (a, b) = ([1, 2, 3, 4], [5, 0, 2, 2]);
        let x = pair_loss(&m, &a, &b).unwrap();
        let y = pair_loss(&m.swapped(), &b, &a).unwrap();
        assert!((x - y).abs() < 1e-15);
        assert!(x >= 0.0);
    }

    #[test]
    fn uniformity_examples() {
        assert_eq!(batch_uniformity(&[vec![0.25; 4]]).unwrap(), 0.0);
        let mut onehot = vec![0.0; 64];
        onehot[3] = 1.0;
        assert!((batch_uniformity(&[onehot]).unwrap() - 64f64.ln()).abs() < 1e-12);
        assert!((batch_uniformity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).abs() < 1e-15);
        assert!(matches!(batch_uniformity(&[]), Err(TwinError::EmptyBatch)));
    }

    fn check_gradients(model: &TwinModel, batch: &[Pair<'_>], lambda: f64) -> f64 {
        let (_, analytic) = gradients(model, batch, lambda).unwrap();
        let targets = batch_codes(model, batch).unwrap();
        let fd = richardson_gradient(
            |m: &TwinModel| objective_with_targets(m, batch, lambda, &targets).unwrap().total,
            model,
            2e-3,
        );
        max_relative_error(&analytic, &fd)
    }

    #[test]
    fn stacked_towers_gradient_check() {
        let mut d = dims(4, 3, 2, 2, 3);
        d.layers = 2;
        let m = random_model(d, 21, 0.6);
        let batch: Vec<Pair<'_>> = vec![(&[0, 1, 2], &[3, 3, 1]), (&[2, 2, 0], &[1, 0, 3])];
        let err = check_gradients(&m, &batch, 0.7);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn frozen_target_objective_matches_live_objective_at_origin() {
        let m = random_model(dims(5, 4, 3, 3, 4), 2, 0.5);
        let batch: Vec<Pair<'_>> = vec![(&[0, 1, 2, 3], &[4, 4, 1, 0])];
        let targets = batch_codes(&m, &batch).unwrap();
        assert_eq!(objective(&m, &batch, 1.0).unwrap(), objective_with_targets(&m, &batch, 1.0, &targets).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = random_model(dims(5, 4, 3, 3, 4), 13, 0.08);
        let bytes = save_checkpoint(&m);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_checkpoint(&back), bytes);

        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["version"] = "nbase-checkpoint-v0".into();
        assert!(matches!(load_checkpoint(&serde_json::to_vec(&v).unwrap()), Err(TwinError::Version(_))));

        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["dims"]["H"] = 5.into();
        assert!(matches!(load_checkpoint(&serde_json::to_vec(&v).unwrap()), Err(TwinError::Shape(_))));

        assert!(m.check_fingerprint("fp").is_ok());
        assert!(matches!(m.check_fingerprint("other"), Err(TwinError::Fingerprint { .. })));
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let a = [0u32, 1, 2, 3];
        let b = [3u32, 2, 1, 0];
        let pairs: Vec<Pair<'_>> = vec![(&a, &b), (&b, &a)];
        let cfg = TrainConfig { epochs: 3, h: 3, d: 3, buckets: 4, batch_size: 1, ..TrainConfig::default() };
        let (m1, h1) = train(&pairs, 4, 4, "fp", &cfg, |_| {}).unwrap();
        let (m2, _) = train(&pairs, 4, 4, "fp", &cfg, |_| {}).unwrap();
        assert_eq!(save_checkpoint(&m1), save_checkpoint(&m2));
        assert_eq!(h1.epochs.len(), 3);
        assert!(matches!(train(&[], 4, 4, "fp", &cfg, |_| {}), Err(TwinError::NoPairs)));
        let bad = TrainConfig { epochs: 0, ..cfg };
        assert!(train(&pairs, 4, 4, "fp", &bad, |_| {}).is_err());
    }

    #[test]
    fn single_repeated_pair_overfits() {
        // The stop-gradient loss only pulls the two codes together; sharpening
        // comes from Adam's sign-like steps at a large rate and depends on the seed.
        let a = [0u32, 1, 2, 3];
        let b = [2u32, 2, 0, 1];
        let pairs: Vec<Pair<'_>> = vec![(&a, &b)];
        let cfg = TrainConfig {
            epochs: 200,
            lr: 3.0,
            uniformity_weight: 0.0,
            h: 2,
            d: 2,
            buckets: 2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (_, hist) = train(&pairs, 4, 4, "fp", &cfg, |_| {}).unwrap();
        assert!(hist.final_base_loss().unwrap() < 0.05, "{:?}", hist.final_base_loss());
    }

    #[test]
    fn sgd_conserves_summed_output_bias() {
        // Per pair the output-bias gradients are ½(pL − pR) and ½(pR − pL), so
        // plain SGD keeps bL + bR fixed and cannot sharpen the shared code.
        let segs = [[0u32, 1, 2, 3], [2, 2, 0, 1], [3, 1, 1, 0]];
        let pairs: Vec<Pair<'_>> = vec![(&segs[0], &segs[1]), (&segs[1], &segs[2])];
        let cfg = TrainConfig {
            epochs: 50,
            lr: 0.5,
            uniformity_weight: 0.0,
            h: 3,
            d: 3,
            buckets: 4,
            batch_size: 2,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let dims = Dims { vocab: 4, segment_length: 4, h: 3, d: 3, buckets: 4, layers: 1 };
        let init = random_model(dims, cfg.seed, cfg.init_scale);
        let (trained, _) = train(&pairs, 4, 4, "fp", &cfg, |_| {}).unwrap();
        for k in 0..4 {
            let before = init.left.output.b[k] + init.right.output.b[k];
            let after = trained.left.output.b[k] + trained.right.output.b[k];
            assert!((before - after).abs() < 1e-12, "bucket {k}: {before} vs {after}");
        }
        assert_ne!(init.left.output.b, trained.left.output.b);
    }
}
