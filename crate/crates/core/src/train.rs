//! Joint training of the encoder: triplet margin loss on representations plus
//! masked-cell-prediction cross-entropy, with per-epoch random timestamps.
//!
//! Every source triplet enters a batch as two anchor variants (the stored
//! masked anchor and a fresh mask draw over the same clean anchor), one
//! positive and one negative. Both variants are scored against the same
//! positive and negative.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::Container;
use crate::dataset::{mask_anchor, TokenPair, TripletSample, SEQ_LEN};
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig, Params, Sequence};
use crate::tensor::log_sum_exp;

/// Last admissible start minute of a 16-token training sequence.
pub const MAX_START: u16 = 1424;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Early stopping is not considered before this many epochs.
    pub min_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Triplet margin β.
    pub margin: f32,
    /// Mask rate r for the extra anchor variant.
    pub mask_rate: f64,
    /// Optional cap on the number of source triplets visited per epoch.
    pub samples_per_epoch: Option<usize>,
    pub clip_norm: f32,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 70,
            min_epochs: 1,
            patience: 8,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            margin: 0.5,
            mask_rate: 0.2,
            samples_per_epoch: None,
            clip_norm: 1.0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("max_epochs and batch_size must be >= 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask_rate must be in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::Config("samples_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named hyperparameter rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// d_model 256, d_hid 1024, β 0.5, r 0.2, 8 layers, 8 heads.
    Dagger,
}

impl Preset {
    pub fn configs(self, zone_vocab: usize, cell_vocab: usize, seed: u64) -> (ModelConfig, TrainConfig) {
        match self {
            Preset::Dagger => (
                ModelConfig::dagger(zone_vocab, cell_vocab),
                TrainConfig {
                    seed,
                    margin: 0.5,
                    mask_rate: 0.2,
                    ..TrainConfig::default()
                },
            ),
        }
    }
}

/// `(t_A, t_P, t_N)`: anchor and negative uniform on `[1, 1424]`, positive
/// within 16 minutes of the anchor, clamped to the same range.
pub fn sample_timestamps<R: Rng + ?Sized>(rng: &mut R) -> (u16, u16, u16) {
    let t_a = rng.gen_range(1..=MAX_START);
    let u: i32 = rng.gen_range(-16..=16);
    let t_p = (t_a as i32 + u).clamp(1, MAX_START as i32) as u16;
    let t_n = rng.gen_range(1..=MAX_START);
    (t_a, t_p, t_n)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

/// Mean over samples of `max(0, |A - P|^2 - |A - N|^2 + β)`.
pub fn triplet_loss(samples: &[(&[f32], &[f32], &[f32])], beta: f32) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("samples", "no triplets"));
    }
    let mut total = 0.0;
    for (a, p, n) in samples {
        if a.len() != p.len() || a.len() != n.len() {
            return Err(Error::invalid(
                "representation",
                format!("dimension mismatch {} / {} / {}", a.len(), p.len(), n.len()),
            ));
        }
        total += (sq_dist(a, p) - sq_dist(a, n) + beta as f64).max(0.0);
    }
    Ok(total / samples.len() as f64)
}

/// Mean over masked positions of `-log softmax(logits)[truth]`; 0 when
/// nothing is masked.
pub fn mcp_loss(logits: &BTreeMap<u8, Vec<f32>>, truth: &BTreeMap<u8, u32>) -> Result<f64> {
    if let Some(k) = logits.keys().find(|k| !truth.contains_key(k)) {
        return Err(Error::invalid("masked_truth", format!("no truth for masked index {k}")));
    }
    if let Some(k) = truth.keys().find(|k| !logits.contains_key(k)) {
        return Err(Error::invalid("logits", format!("no logits for masked index {k}")));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for (k, row) in logits {
        let t = truth[k] as usize;
        if t >= row.len() {
            return Err(Error::invalid("masked_truth", format!("class {t} outside logits")));
        }
        // ln Σ exp(x_j - x_t), in f64 so constant offsets cancel exactly
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        total += s.ln() + (max - row[t] as f64);
    }
    Ok(total / logits.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAnchor {
    pub tokens: [TokenPair; SEQ_LEN],
    /// 1-based masked positions.
    pub mask_indices: Vec<u8>,
    pub masked_truth: Vec<u32>,
}

/// One source triplet as it enters a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub anchors: [MaskedAnchor; 2],
    pub positive: [TokenPair; SEQ_LEN],
    pub negative: [TokenPair; SEQ_LEN],
    /// `(t_A, t_P, t_N)`.
    pub times: (u16, u16, u16),
}

impl BatchItem {
    /// Stored anchor plus a fresh mask draw over the clean anchor.
    pub fn from_sample<R: Rng + ?Sized>(s: &TripletSample, mask_rate: f64, rng: &mut R) -> Self {
        let times = sample_timestamps(rng);
        let (tokens, mask_indices, masked_truth) = mask_anchor(&s.clean_anchor, mask_rate, rng);
        Self {
            anchors: [
                MaskedAnchor {
                    tokens: s.anchor,
                    mask_indices: s.mask_indices.clone(),
                    masked_truth: s.masked_truth.clone(),
                },
                MaskedAnchor {
                    tokens,
                    mask_indices,
                    masked_truth,
                },
            ],
            positive: s.positive,
            negative: s.negative,
            times,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub joint: f64,
    pub triplet: f64,
    pub mcp: f64,
    pub mcp_correct: usize,
    pub mcp_total: usize,
}

fn minutes_from(t: u16) -> [u16; SEQ_LEN] {
    std::array::from_fn(|j| t + j as u16)
}

/// Joint loss `L1 + L2` of a batch; accumulates gradients when `grads` is given.
pub fn batch_loss(
    enc: &Encoder,
    items: &[BatchItem],
    margin: f32,
    grads: Option<&mut Params>,
) -> Result<LossParts> {
    if items.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let d = enc.config.d_model;
    let c = enc.config.cell_vocab_size;
    let minutes: Vec<[[u16; SEQ_LEN]; 3]> = items
        .iter()
        .map(|it| [minutes_from(it.times.0), minutes_from(it.times.1), minutes_from(it.times.2)])
        .collect();
    let mut seqs = Vec::with_capacity(items.len() * 4);
    for (it, m) in items.iter().zip(&minutes) {
        seqs.push(Sequence { tokens: &it.anchors[0].tokens, minutes: &m[0] });
        seqs.push(Sequence { tokens: &it.anchors[1].tokens, minutes: &m[0] });
        seqs.push(Sequence { tokens: &it.positive, minutes: &m[1] });
        seqs.push(Sequence { tokens: &it.negative, minutes: &m[2] });
    }
    let fwd = enc.forward_batch(&seqs)?;
    let rep = |s: usize| &fwd.reps[s * d..(s + 1) * d];

    // triplet term over 2B hinge terms
    let n_terms = 2 * items.len();
    let scale = 1.0 / n_terms as f32;
    let mut l1 = 0.0f64;
    let mut d_reps = vec![0.0f32; fwd.reps.len()];
    for i in 0..items.len() {
        let (ip, in_) = (4 * i + 2, 4 * i + 3);
        for v in 0..2 {
            let ia = 4 * i + v;
            let (a, p, n) = (rep(ia), rep(ip), rep(in_));
            let h = sq_dist(a, p) - sq_dist(a, n) + margin as f64;
            if h > 0.0 {
                l1 += h;
                for k in 0..d {
                    d_reps[ia * d + k] += scale * 2.0 * (n[k] - p[k]);
                    d_reps[ip * d + k] -= scale * 2.0 * (a[k] - p[k]);
                    d_reps[in_ * d + k] += scale * 2.0 * (a[k] - n[k]);
                }
            }
        }
    }
    l1 /= n_terms as f64;

    // masked cell prediction over every masked anchor position in the batch
    let mut rows = Vec::new();
    let mut truths = Vec::new();
    for (i, it) in items.iter().enumerate() {
        for (v, a) in it.anchors.iter().enumerate() {
            let (off, _) = fwd.spans[4 * i + v];
            for (&j, &t) in a.mask_indices.iter().zip(&a.masked_truth) {
                rows.push(off + j as usize - 1);
                truths.push(t as usize);
            }
        }
    }
    let m = rows.len();
    let mut l2 = 0.0f64;
    let mut correct = 0;
    let mut d_outputs = vec![0.0f32; fwd.outputs.len()];
    if m > 0 {
        let gathered: Vec<f32> = rows
            .iter()
            .flat_map(|&r| fwd.outputs[r * d..(r + 1) * d].iter().copied())
            .collect();
        let logits = enc.mcp_forward(&gathered, m);
        let mut d_logits = vec![0.0f32; m * c];
        for (q, (row, &t)) in logits.chunks_exact(c).zip(&truths).enumerate() {
            if t >= c {
                return Err(Error::invalid("masked_truth", format!("class {t} outside vocabulary")));
            }
            let lse = log_sum_exp(row);
            l2 += (lse - row[t]) as f64;
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            correct += usize::from(argmax == t);
            let dl = &mut d_logits[q * c..(q + 1) * c];
            for (g, &z) in dl.iter_mut().zip(row) {
                *g = (z - lse).exp() / m as f32;
            }
            dl[t] -= 1.0 / m as f32;
        }
        l2 /= m as f64;
        if let Some(g) = grads {
            let d_rows = enc.mcp_backward(&gathered, m, &d_logits, g);
            for (q, &r) in rows.iter().enumerate() {
                for (o, v) in d_outputs[r * d..(r + 1) * d].iter_mut().zip(&d_rows[q * d..(q + 1) * d]) {
                    *o += v;
                }
            }
            enc.backward_batch(&fwd, &d_reps, d_outputs, g);
        }
    } else if let Some(g) = grads {
        enc.backward_batch(&fwd, &d_reps, d_outputs, g);
    }

    Ok(LossParts {
        joint: l1 + l2,
        triplet: l1,
        mcp: l2,
        mcp_correct: correct,
        mcp_total: m,
    })
}

/// Global L2 norm of all gradient tensors.
pub fn grad_norm(grads: &Params) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so that their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f32) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for (_, t) in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(params: &Params, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((( _, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub triplet_loss: f64,
    pub mcp_loss: f64,
    pub mcp_accuracy: f64,
    /// Wall time; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

impl EpochStats {
    /// One log line per epoch.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} l1={:.6} l2={:.6} mcp_acc={:.4} secs={:.1}",
            self.epoch, self.loss, self.triplet_loss, self.mcp_loss, self.mcp_accuracy, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutStats {
    pub n_triplets: usize,
    pub cos_anchor_positive: f64,
    pub cos_anchor_negative: f64,
    pub mcp_accuracy: f64,
    /// Accuracy of always predicting the most frequent training truth.
    pub majority_baseline: f64,
    pub n_masked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch of the returned checkpoint; 0 if no epoch finished.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: Option<String>,
    pub holdout: Option<HoldoutStats>,
    pub n_train: usize,
    pub n_holdout: usize,
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: Encoder,
    pub best: Params,
    pub adam: Adam,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub since_best: usize,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    config: ModelConfig,
    vocab_hash: String,
    train_config: TrainConfig,
    history: Vec<EpochStats>,
    best_epoch: usize,
    best_loss: f64,
    since_best: usize,
    adam_step: u64,
}

impl TrainState {
    pub fn new(encoder: Encoder, cfg: &TrainConfig) -> Self {
        Self {
            best: encoder.params.clone(),
            adam: Adam::new(&encoder.params, cfg.learning_rate),
            encoder,
            history: Vec::new(),
            best_epoch: 0,
            best_loss: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    fn finished(&self, cfg: &TrainConfig) -> bool {
        self.epochs_done() >= cfg.max_epochs
            || (self.epochs_done() >= cfg.min_epochs && self.since_best >= cfg.patience)
    }

    pub fn to_container(&self, cfg: &TrainConfig) -> Container {
        let meta = StateMeta {
            kind: "train_state".into(),
            config: self.encoder.config.clone(),
            vocab_hash: self.encoder.vocab_hash.clone(),
            train_config: cfg.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            best_loss: self.best_loss,
            since_best: self.since_best,
            adam_step: self.adam.step,
        };
        let mut c = Container {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors: Vec::new(),
        };
        c.push_params("param.", &self.encoder.params);
        c.push_params("best.", &self.best);
        c.push_params("adam_m.", &self.adam.m);
        c.push_params("adam_v.", &self.adam.v);
        c
    }

    pub fn from_container(c: &Container) -> Result<(Self, TrainConfig)> {
        let meta: StateMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::format("train state", e.to_string()))?;
        if meta.kind != "train_state" {
            return Err(Error::format("train state", format!("unexpected kind {}", meta.kind)));
        }
        meta.config.validate()?;
        let params = c.take_params("param.", &meta.config)?;
        let mut adam = Adam::new(&params, meta.train_config.learning_rate);
        adam.step = meta.adam_step;
        adam.m = c.take_params("adam_m.", &meta.config)?;
        adam.v = c.take_params("adam_v.", &meta.config)?;
        let state = Self {
            best: c.take_params("best.", &meta.config)?,
            encoder: Encoder::from_params(meta.config, params, meta.vocab_hash),
            adam,
            history: meta.history,
            best_epoch: meta.best_epoch,
            best_loss: meta.best_loss,
            since_best: meta.since_best,
        };
        Ok((state, meta.train_config))
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        self.to_container(cfg).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Result of a training run: the best checkpoint and its report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub report: TrainReport,
}

const STREAM_SPLIT: u64 = 1 << 32;
const STREAM_HOLDOUT: u64 = (1 << 32) + 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic `(train, holdout)` index split.
pub fn split_indices(n: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(cfg.seed, STREAM_SPLIT));
    let n_hold = if n >= 10 {
        (n as f64 * cfg.holdout_fraction).floor() as usize
    } else {
        0
    };
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

/// Trains from scratch.
pub fn train(
    triplets: &[TripletSample],
    encoder: Encoder,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::new(encoder, cfg);
    resume(triplets, state, cfg, on_epoch)
}

/// Continues training from `state` until early stopping or `max_epochs`.
pub fn resume(
    triplets: &[TripletSample],
    mut state: TrainState,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::invalid("dataset", "no training triplets"));
    }
    let (train_idx, hold_idx) = split_indices(triplets.len(), cfg);
    if train_idx.is_empty() {
        return Err(Error::invalid("dataset", "holdout split leaves no training triplets"));
    }
    let mut diverged = None;

    while !state.finished(cfg) {
        let epoch = state.epochs_done() + 1;
        let started = Instant::now();
        let mut rng = stream_rng(cfg.seed, epoch as u64);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.samples_per_epoch {
            order.truncate(cap);
        }
        let (mut loss, mut l1, mut l2) = (0.0, 0.0, 0.0);
        let (mut correct, mut total) = (0usize, 0usize);
        let mut failure = None;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| BatchItem::from_sample(&triplets[i], cfg.mask_rate, &mut rng))
                .collect();
            let mut grads = state.encoder.params.zeros_like();
            let parts = match batch_loss(&state.encoder, &items, cfg.margin, Some(&mut grads)) {
                Ok(p) => p,
                Err(Error::NonFinite { location }) => {
                    failure = Some(format!("non-finite activations in {location}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            if !parts.joint.is_finite() {
                failure = Some("non-finite loss".into());
                break;
            }
            let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                failure = Some("non-finite gradient".into());
                break;
            }
            state.adam.update(&mut state.encoder.params, &grads);
            let w = items.len() as f64;
            loss += parts.joint * w;
            l1 += parts.triplet * w;
            l2 += parts.mcp * w;
            correct += parts.mcp_correct;
            total += parts.mcp_total;
        }
        if let Some(msg) = failure {
            log::warn!("training diverged in epoch {epoch}: {msg}");
            diverged = Some(format!("epoch {epoch}: {msg}"));
            break;
        }
        let n = order.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss / n,
            triplet_loss: l1 / n,
            mcp_loss: l2 / n,
            mcp_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            seconds: started.elapsed().as_secs_f64(),
        };
        if stats.loss < state.best_loss {
            state.best_loss = stats.loss;
            state.best_epoch = epoch;
            state.best = state.encoder.params.clone();
            state.since_best = 0;
        } else {
            state.since_best += 1;
        }
        state.history.push(stats.clone());
        on_epoch(&stats, &state)?;
    }

    let stopped_early = diverged.is_none() && state.epochs_done() < cfg.max_epochs;
    let best = Encoder::from_params(
        state.encoder.config.clone(),
        state.best.clone(),
        state.encoder.vocab_hash.clone(),
    );
    let holdout = if hold_idx.is_empty() {
        None
    } else {
        Some(holdout_stats(&best, triplets, &train_idx, &hold_idx, cfg)?)
    };
    Ok(TrainOutcome {
        encoder: best,
        report: TrainReport {
            epochs: state.history,
            best_epoch: state.best_epoch,
            stopped_early,
            diverged,
            holdout,
            n_train: train_idx.len(),
            n_holdout: hold_idx.len(),
        },
    })
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine separation and MCP accuracy on held-out triplets, using the
/// stored masked anchors.
pub fn holdout_stats(
    enc: &Encoder,
    triplets: &[TripletSample],
    train_idx: &[usize],
    hold_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<HoldoutStats> {
    let d = enc.config.d_model;
    let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in train_idx {
        for &t in &triplets[i].masked_truth {
            *freq.entry(t).or_default() += 1;
        }
    }
    let majority = freq
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&k, _)| k);

    let mut rng = stream_rng(cfg.seed, STREAM_HOLDOUT);
    let (mut cos_ap, mut cos_an) = (0.0, 0.0);
    let (mut correct, mut base, mut total) = (0usize, 0usize, 0usize);
    for chunk in hold_idx.chunks(cfg.batch_size) {
        let times: Vec<_> = chunk.iter().map(|_| sample_timestamps(&mut rng)).collect();
        let minutes: Vec<[[u16; SEQ_LEN]; 3]> = times
            .iter()
            .map(|t| [minutes_from(t.0), minutes_from(t.1), minutes_from(t.2)])
            .collect();
        let mut seqs = Vec::new();
        for (&i, m) in chunk.iter().zip(&minutes) {
            let s = &triplets[i];
            seqs.push(Sequence { tokens: &s.anchor, minutes: &m[0] });
            seqs.push(Sequence { tokens: &s.positive, minutes: &m[1] });
            seqs.push(Sequence { tokens: &s.negative, minutes: &m[2] });
        }
        let fwd = enc.forward_batch(&seqs)?;
        for (k, &i) in chunk.iter().enumerate() {
            let r = |s: usize| &fwd.reps[s * d..(s + 1) * d];
            cos_ap += cosine(r(3 * k), r(3 * k + 1));
            cos_an += cosine(r(3 * k), r(3 * k + 2));
            let s = &triplets[i];
            if s.mask_indices.is_empty() {
                continue;
            }
            let (off, _) = fwd.spans[3 * k];
            let rows: Vec<f32> = s
                .mask_indices
                .iter()
                .flat_map(|&j| {
                    let r = off + j as usize - 1;
                    fwd.outputs[r * d..(r + 1) * d].iter().copied()
                })
                .collect();
            let logits = enc.mcp_forward(&rows, s.mask_indices.len());
            let c = enc.config.cell_vocab_size;
            for (row, &t) in logits.chunks_exact(c).zip(&s.masked_truth) {
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
                correct += usize::from(argmax as u32 == t);
                base += usize::from(Some(t) == majority);
                total += 1;
            }
        }
    }
    let n = hold_idx.len() as f64;
    let frac = |x: usize| if total > 0 { x as f64 / total as f64 } else { 0.0 };
    Ok(HoldoutStats {
        n_triplets: hold_idx.len(),
        cos_anchor_positive: cos_ap / n,
        cos_anchor_negative: cos_an / n,
        mcp_accuracy: frac(correct),
        majority_baseline: frac(base),
        n_masked: total,
    })
}

/// Denominator floor of [`gradient_check`]. Some gradients are exactly zero
/// (key bias under softmax, representation bias under differences), where
/// the finite differences are rounding noise of order 1e-6.
pub const GRAD_CHECK_FLOOR: f64 = 1e-2;

/// Per-tensor relative error `|g_a - g_n| / max(|g_a| + |g_n|, floor)`
/// between the analytic gradient of [`batch_loss`] and central finite
/// differences with step `h`.
pub fn gradient_check(
    enc: &Encoder,
    items: &[BatchItem],
    margin: f32,
    h: f32,
) -> Result<Vec<(String, f64)>> {
    let mut analytic = enc.params.zeros_like();
    batch_loss(enc, items, margin, Some(&mut analytic))?;
    let mut probe = enc.clone();
    let names: Vec<String> = enc.params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = enc.params.tensors()[ti].1.len();
        let mut numeric = vec![0.0f64; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = enc.params.tensors()[ti].1.data[i];
            probe.params.tensors_mut()[ti].1.data[i] = orig + h;
            let plus = batch_loss(&probe, items, margin, None)?.joint;
            probe.params.tensors_mut()[ti].1.data[i] = orig - h;
            let minus = batch_loss(&probe, items, margin, None)?.joint;
            probe.params.tensors_mut()[ti].1.data[i] = orig;
            *slot = (plus - minus) / (2.0 * h as f64);
        }
        let ga = &analytic.tensors()[ti].1.data;
        let diff: f64 = ga
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (*a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = ga.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        out.push((name.clone(), diff / (na + nn).max(GRAD_CHECK_FLOOR)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_triplets, PrepSequence, CHUNK_LEN};

    fn tiny_encoder(c: usize, seed: u64) -> Encoder {
        let cfg = ModelConfig {
            d_model: 8,
            d_hid: 16,
            n_layers: 1,
            n_heads: 2,
            cell_vocab_size: c,
            zone_vocab_size: 6,
        };
        Encoder::new(cfg, "t", seed).unwrap()
    }

    fn corpus(n: usize, c: u32, seed: u64, rate: f64) -> Vec<TripletSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chunks: Vec<PrepSequence> = (0..n)
            .map(|k| PrepSequence {
                player_id: k as u32,
                day: 1,
                tokens: std::array::from_fn(|j| {
                    let cell = 3 + ((k * 3 + j / 4 + rng.gen_range(0..2)) as u32 % (c - 3));
                    TokenPair::new(3 + (cell % 3), cell)
                }),
            })
            .collect();
        assert_eq!(chunks[0].tokens.len(), CHUNK_LEN);
        make_triplets(&chunks, rate, &mut rng).unwrap()
    }

    #[test]
    fn timestamps_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let (a, p, ng) = sample_timestamps(&mut rng);
            assert!((1..=MAX_START).contains(&a));
            assert!((1..=MAX_START).contains(&p));
            assert!((1..=MAX_START).contains(&ng));
            assert!((a as i32 - p as i32).abs() <= 16);
            sum += a as f64;
        }
        // uniform on 1..=1424: mean 712.5, sd 411.1 / sqrt(n)
        let sigma = ((1424f64 * 1424.0 - 1.0) / 12.0).sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64 - 712.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn triplet_loss_cases() {
        let a = [0.0f32, 0.0];
        let far = [0.0f32, 2.0];
        assert_eq!(triplet_loss(&[(&a, &a, &far)], 0.5).unwrap(), 0.0);
        assert_eq!(triplet_loss(&[(&a, &a, &a)], 0.5).unwrap(), 0.5);
        assert_eq!(triplet_loss(&[(&a, &[1.0, 0.0], &far)], 0.5).unwrap(), 0.0);
        assert!(triplet_loss(&[(&a, &[1.0], &far)], 0.5).is_err());
        // batch mean
        assert_eq!(triplet_loss(&[(&a, &a, &a), (&a, &a, &far)], 0.5).unwrap(), 0.25);
    }

    #[test]
    fn mcp_loss_cases() {
        let c = 7;
        let logits = BTreeMap::from([(1u8, vec![0.3f32; c]), (4, vec![0.3; c])]);
        let truth = BTreeMap::from([(1u8, 2u32), (4, 5)]);
        assert!((mcp_loss(&logits, &truth).unwrap() - (c as f64).ln()).abs() < 1e-6);

        let logits = BTreeMap::from([(2u8, vec![1.0f32, 2.0, 3.0])]);
        let truth = BTreeMap::from([(2u8, 2u32)]);
        let want = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((mcp_loss(&logits, &truth).unwrap() - want).abs() < 1e-6);
        assert!((want - 0.4076).abs() < 1e-4);

        let logits = BTreeMap::from([(2u8, vec![0.0f32, 80.0, 0.0])]);
        let truth = BTreeMap::from([(2u8, 1u32)]);
        assert!(mcp_loss(&logits, &truth).unwrap() < 1e-6);

        let truth = BTreeMap::from([(3u8, 1u32)]);
        assert!(mcp_loss(&logits, &truth).is_err());
        assert_eq!(mcp_loss(&BTreeMap::new(), &BTreeMap::new()).unwrap(), 0.0);
    }

    #[test]
    fn zero_mask_rate_has_no_mcp_term() {
        let enc = tiny_encoder(12, 1);
        let trips = corpus(6, 12, 2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<_> = trips.iter().map(|s| BatchItem::from_sample(s, 0.0, &mut rng)).collect();
        let parts = batch_loss(&enc, &items, 0.5, None).unwrap();
        assert_eq!(parts.mcp, 0.0);
        assert_eq!(parts.mcp_total, 0);
        assert_eq!(parts.joint, parts.triplet);
    }

    #[test]
    fn joint_is_sum_and_matches_standalone_losses() {
        let enc = tiny_encoder(12, 4);
        let trips = corpus(5, 12, 5, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let items: Vec<_> = trips.iter().map(|s| BatchItem::from_sample(s, 0.3, &mut rng)).collect();
        let parts = batch_loss(&enc, &items, 0.5, None).unwrap();
        assert_eq!(parts.joint, parts.triplet + parts.mcp);

        let mut reps = Vec::new();
        let mut mcp_sum = 0.0;
        let mut n_masked = 0;
        for it in &items {
            let r = |tokens: &[TokenPair], t: u16| {
                enc.representation(tokens, &minutes_from(t)).unwrap()
            };
            let a0 = r(&it.anchors[0].tokens, it.times.0);
            let a1 = r(&it.anchors[1].tokens, it.times.0);
            let p = r(&it.positive, it.times.1);
            let n = r(&it.negative, it.times.2);
            reps.push((a0, p.clone(), n.clone()));
            reps.push((a1, p, n));
            for a in &it.anchors {
                let e = enc.embed_sequence(&a.tokens, it.times.0).unwrap();
                let f = enc.encode(&e).unwrap();
                let logits: BTreeMap<u8, Vec<f32>> =
                    enc.mcp_logits(&f, &a.mask_indices).unwrap().into_iter().collect();
                let truth: BTreeMap<u8, u32> =
                    a.mask_indices.iter().copied().zip(a.masked_truth.iter().copied()).collect();
                if !logits.is_empty() {
                    mcp_sum += mcp_loss(&logits, &truth).unwrap() * logits.len() as f64;
                    n_masked += logits.len();
                }
            }
        }
        let view: Vec<(&[f32], &[f32], &[f32])> =
            reps.iter().map(|(a, p, n)| (&a[..], &p[..], &n[..])).collect();
        let l1 = triplet_loss(&view, 0.5).unwrap();
        assert!((parts.triplet - l1).abs() < 1e-4, "{} vs {l1}", parts.triplet);
        assert_eq!(parts.mcp_total, n_masked);
        assert!((parts.mcp - mcp_sum / n_masked as f64).abs() < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let enc = tiny_encoder(9, 7);
        let trips = corpus(8, 9, 8, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<_> = trips.iter().map(|s| BatchItem::from_sample(s, 0.3, &mut rng)).collect();
        let report = crate::train::gradient_check(&enc, &items, 0.5, 1e-2).unwrap();
        for (name, err) in &report {
            assert!(*err < 1e-3, "{name}: relative error {err}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let enc = tiny_encoder(9, 1);
        let mut p = enc.params.clone();
        let mut g = p.zeros_like();
        g.rep_b.data[0] = 0.3;
        g.rep_b.data[1] = -5.0;
        let mut adam = Adam::new(&p, 0.01);
        adam.update(&mut p, &g);
        assert!((enc.params.rep_b.data[0] - p.rep_b.data[0] - 0.01).abs() < 1e-6);
        assert!((p.rep_b.data[1] - enc.params.rep_b.data[1] - 0.01).abs() < 1e-6);
        assert_eq!(p.rep_b.data[2], enc.params.rep_b.data[2]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let enc = tiny_encoder(9, 1);
        let mut g = enc.params.clone();
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-4);
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 12,
            patience: 3,
            batch_size: 4,
            learning_rate: 3e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_training_decreases_loss_and_is_deterministic() {
        let trips = corpus(8, 12, 11, 0.2);
        let cfg = small_cfg(5);
        let run = || {
            train(&trips, tiny_encoder(12, 2), &cfg, &mut |_, _| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.encoder.params, b.encoder.params);
        let first = a.report.epochs[0].loss;
        let best = a.report.epochs[a.report.best_epoch - 1].loss;
        assert!(best < first, "best {best} first {first}");
        assert!(a.report.epochs.len() <= cfg.max_epochs);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let trips = corpus(12, 12, 3, 0.2);
        let cfg = TrainConfig {
            max_epochs: 40,
            learning_rate: 0.05,
            ..small_cfg(1)
        };
        let out = train(&trips, tiny_encoder(12, 3), &cfg, &mut |_, _| Ok(())).unwrap();
        let r = &out.report;
        assert!(r.epochs.len() <= r.best_epoch.max(cfg.min_epochs) + cfg.patience);
        if r.stopped_early {
            assert_eq!(r.epochs.len(), r.best_epoch + cfg.patience);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let trips = corpus(10, 12, 21, 0.2);
        let cfg = small_cfg(8);
        let full = train(&trips, tiny_encoder(12, 4), &cfg, &mut |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let short = TrainConfig { max_epochs: 3, ..cfg.clone() };
        train(&trips, tiny_encoder(12, 4), &short, &mut |_, s| s.save(&cfg, &path)).unwrap();
        let (state, saved_cfg) = TrainState::load(&path).unwrap();
        assert_eq!(saved_cfg, cfg);
        let resumed = resume(&trips, state, &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(
            serde_json::to_string(&resumed.report).unwrap(),
            serde_json::to_string(&full.report).unwrap()
        );
        assert_eq!(resumed.encoder.params, full.encoder.params);
    }

    #[test]
    fn empty_dataset_rejected() {
        let err = train(&[], tiny_encoder(12, 1), &small_cfg(1), &mut |_, _| Ok(())).unwrap_err();
        assert_eq!(err.code(), "invalid_input");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::default() }.validate().is_err());
        let (m, t) = Preset::Dagger.configs(10, 20, 3);
        assert_eq!((m.d_model, m.d_hid, m.n_layers, m.n_heads), (256, 1024, 8, 8));
        assert_eq!((t.margin, t.mask_rate, t.seed), (0.5, 0.2, 3));
        assert!(t.max_epochs >= 70);
    }
}
