//! Joint optimization of the language-model and recommendation losses:
//! schedules, AdamW, clipping, negative sampling, seeded loaders, the step
//! engine shared with multi-task pretraining, and early stopping.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbpe::{TokenId, Vocab};
use crate::corpus::{build_history_text, build_item_text, join_history, BehaviorDataset, CorpusError, LeaveOneOut};
use crate::model::{pair_logits, shifted_targets, Model, ModelConfig, ModelError};
use crate::numerics::{NumericsError, Objective, Scalar, Tape, Tensor, Var};
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("negative pool exhausted for user {user:?}: need {need}, {available} eligible")]
    PoolExhausted { user: String, need: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::bbpe::BbpeError> for TrainError {
    fn from(e: crate::bbpe::BbpeError) -> Self {
        TrainError::Corpus(CorpusError::Tokenizer(e))
    }
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Language-model loss only.
    LmOnly,
    /// Recommendation loss only (the ablation without the LM objective).
    RecOnly,
    /// `L1 + λ·L2`.
    Joint,
    /// `L1 + λ·L2` with task-agnostic text mixed into the LM batches.
    JointPlusAgnostic,
}

impl Mode {
    pub fn uses_lm(self) -> bool {
        self != Mode::RecOnly
    }

    pub fn uses_rec(self) -> bool {
        self != Mode::LmOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub mode: Mode,
    pub lambda0: f64,
    /// Terminal λ as a fraction of `lambda0`.
    pub lambda_floor: f64,
    pub lm_batch_size: usize,
    pub rec_batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Validation evaluations without improvement before stopping.
    pub patience: u64,
    /// Optimizer steps between validation evaluations.
    pub eval_interval: u64,
    pub negatives_per_positive: usize,
    /// Micro-batches averaged per optimizer step.
    pub grad_accum: usize,
    /// Specific:agnostic share of LM batch slots in `joint_plus_agnostic`.
    pub mix_ratio: (u32, u32),
    /// Users scored by the validator.
    pub val_users: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            mode: Mode::Joint,
            lambda0: 1.0,
            lambda_floor: 0.1,
            lm_batch_size: 8,
            rec_batch_size: 16,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            total_steps: 1000,
            warmup_fraction: 0.01,
            clip_norm: 0.1,
            patience: 100,
            eval_interval: 50,
            negatives_per_positive: 1,
            grad_accum: 1,
            mix_ratio: (70, 30),
            val_users: 100,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Plan(m.to_string()));
        if self.mode.uses_rec() && self.lambda0 <= 0.0 {
            return bad("lambda0 must be positive when the rec loss is used");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda_floor) {
            return bad("lambda_floor must lie in [0, 1]");
        }
        if self.total_steps == 0 || self.eval_interval == 0 || self.grad_accum == 0 {
            return bad("total_steps, eval_interval and grad_accum must be positive");
        }
        if self.mode.uses_lm() && self.lm_batch_size == 0 {
            return bad("lm_batch_size must be positive when the LM loss is used");
        }
        if self.mode.uses_rec() && (self.rec_batch_size == 0 || self.negatives_per_positive == 0) {
            return bad("rec_batch_size and negatives_per_positive must be positive when the rec loss is used");
        }
        if !(self.peak_lr > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return bad("peak_lr and clip_norm must be positive, weight_decay non-negative");
        }
        if self.mode == Mode::JointPlusAgnostic && self.mix_ratio.0 + self.mix_ratio.1 == 0 {
            return bad("mix_ratio must have a positive share");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedules, clipping, optimizer

fn warmup_steps(total: u64, fraction: f64) -> u64 {
    ((fraction * total as f64).ceil() as u64).clamp(1, total)
}

/// Linear warmup to `peak` over the first `warmup_fraction` of steps, then
/// cosine decay to `0.1·peak` at `total`.
pub fn lr_schedule(step: u64, total: u64, peak: f64, warmup_fraction: f64) -> f64 {
    let w = warmup_steps(total, warmup_fraction);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    if total == w {
        return 0.1 * peak;
    }
    let progress = (step.min(total) - w) as f64 / (total - w) as f64;
    0.1 * peak + 0.45 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Cosine decay from `lambda0` at step 0 to `floor·lambda0` at `total`.
pub fn lambda_schedule(step: u64, total: u64, lambda0: f64, floor: f64) -> f64 {
    let progress = step.min(total) as f64 / total.max(1) as f64;
    lambda0 * (floor + 0.5 * (1.0 - floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Plan(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(TrainError::Plan(format!("tensor {i}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            if !g.all_finite() {
                return Err(TrainError::NonFinite {
                    step: self.step + 1,
                    what: format!("gradient of tensor {i}"),
                });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Negative sampling

/// `n` distinct items from `0..pool_size` outside `exclude`, uniform and
/// deterministic per `(seed, draw, user)`.
pub fn sample_negatives(
    user: &str,
    n: usize,
    pool_size: usize,
    exclude: &BTreeSet<usize>,
    seed: u64,
    draw: u64,
) -> Result<Vec<usize>, TrainError> {
    let excluded = exclude.iter().filter(|&&i| i < pool_size).count();
    let available = pool_size - excluded;
    if available < n {
        return Err(TrainError::PoolExhausted {
            user: user.to_string(),
            need: n,
            available,
        });
    }
    let mut rng = rng_for(seed, &[b"negatives", &draw.to_le_bytes(), user.as_bytes()]);
    if available <= 2 * n {
        let mut eligible: Vec<usize> = (0..pool_size).filter(|i| !exclude.contains(i)).collect();
        let (picked, _) = eligible.partial_shuffle(&mut rng, n);
        return Ok(picked.to_vec());
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = rng.random_range(0..pool_size);
        if !exclude.contains(&i) && !out.contains(&i) {
            out.push(i);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    /// Item indices in chronological order.
    pub train: Vec<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

impl UserHistory {
    pub fn train_set(&self) -> BTreeSet<usize> {
        self.train.iter().copied().collect()
    }

    pub fn positives(&self) -> BTreeSet<usize> {
        self.train.iter().chain(&self.val).chain(&self.test).copied().collect()
    }
}

/// A tokenized downstream task: item texts, per-user splits and the LM
/// corpus built from training histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub name: String,
    pub item_ids: Vec<String>,
    pub item_tokens: Vec<Vec<TokenId>>,
    pub users: Vec<UserHistory>,
    pub lm_corpus: Vec<Vec<TokenId>>,
    pub sep: TokenId,
    pub eoh: TokenId,
    pub max_history_tokens: usize,
}

impl TaskData {
    pub fn from_leave_one_out(
        dataset: &BehaviorDataset,
        split: &LeaveOneOut,
        vocab: &Vocab,
        max_history_tokens: usize,
        max_item_tokens: usize,
    ) -> Result<Self, TrainError> {
        let index: HashMap<&str, usize> = dataset.items().iter().enumerate().map(|(i, it)| (it.item_id.as_str(), i)).collect();
        let item_tokens = dataset
            .items()
            .iter()
            .map(|it| build_item_text(it, vocab, max_item_tokens))
            .collect::<Result<Vec<_>, _>>()?;
        let users: Vec<UserHistory> = split
            .users
            .iter()
            .map(|(u, s)| UserHistory {
                user_id: u.clone(),
                train: s.train.iter().map(|i| index[i.as_str()]).collect(),
                val: Some(index[s.val.as_str()]),
                test: Some(index[s.test.as_str()]),
            })
            .collect();
        let mut task = Self {
            name: dataset.name().to_string(),
            item_ids: dataset.items().iter().map(|i| i.item_id.clone()).collect(),
            item_tokens,
            users,
            lm_corpus: Vec::new(),
            sep: vocab.sep()?,
            eoh: vocab.eoh()?,
            max_history_tokens,
        };
        task.lm_corpus = task.users.iter().map(|u| task.history_tokens(&u.train)).collect::<Result<_, _>>()?;
        Ok(task)
    }

    pub fn n_items(&self) -> usize {
        self.item_tokens.len()
    }

    /// History text over item indices (drop-oldest within the budget).
    pub fn history_tokens(&self, items: &[usize]) -> Result<Vec<TokenId>, TrainError> {
        let parts: Vec<&[TokenId]> = items
            .iter()
            .map(|&i| {
                let t = &self.item_tokens[i];
                &t[..t.len() - 1] // without the item's own end marker
            })
            .collect();
        Ok(join_history(&parts, self.sep, self.eoh, self.max_history_tokens)?)
    }

    /// Sequential training pairs `(user, prefix length)`: the prefix of the
    /// training items is the history and the next training item the target.
    pub fn rec_examples(&self) -> Vec<(usize, usize)> {
        self.users
            .iter()
            .enumerate()
            .flat_map(|(u, h)| (1..h.train.len()).map(move |j| (u, j)))
            .collect()
    }
}

/// One history text per user covering all of their interactions, for the
/// LM objective on auxiliary corpora.
pub fn lm_corpus(dataset: &BehaviorDataset, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<TokenId>>, TrainError> {
    dataset
        .item_sequences()
        .values()
        .map(|seq| Ok(build_history_text(&dataset.records(seq), vocab, max_len)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Batches and losses

/// Pairs for one rec head: distinct user and item sequences plus the index
/// of each pair's user and item.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecBatch {
    pub head: usize,
    pub users: Vec<Vec<TokenId>>,
    pub items: Vec<Vec<TokenId>>,
    pub user_of: Vec<usize>,
    pub item_of: Vec<usize>,
    pub labels: Vec<f64>,
}

impl RecBatch {
    pub fn new(head: usize) -> Self {
        Self {
            head,
            ..Self::default()
        }
    }

    /// Adds a pair; item sequences are shared by key.
    pub fn push(&mut self, user: Vec<TokenId>, item_key: usize, item: &[TokenId], label: f64, seen: &mut HashMap<usize, usize>) {
        self.user_of.push(self.users.len());
        self.users.push(user);
        let at = *seen.entry(item_key).or_insert_with(|| {
            self.items.push(item.to_vec());
            self.items.len() - 1
        });
        self.item_of.push(at);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything one micro-batch feeds to the loss: LM sequence groups (each
/// group contributes its own mean NLL) and rec batches per head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepBatch {
    pub lm: Vec<Vec<Vec<TokenId>>>,
    pub rec: Vec<RecBatch>,
}

pub struct LossVars {
    pub total: Var,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
}

fn fold_sum<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Option<Var>, NumericsError> {
    let Some((&first, rest)) = parts.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(Some(acc))
}

/// Mean next-token NLL over all unmasked positions of `seqs`.
pub fn record_lm_loss<T: Scalar>(config: &ModelConfig, tape: &mut Tape<T>, p: &[Var], seqs: &[Vec<TokenId>]) -> Result<Var, ModelError> {
    let mut hidden = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for s in seqs {
        hidden.push(config.hidden(tape, p, s)?);
        targets.extend(shifted_targets(s, config.pad_id));
    }
    let h = if hidden.len() == 1 { hidden[0] } else { tape.concat_rows(&hidden)? };
    let logits = config.lm_logits(tape, p, h)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Mean BCE of the pair logits of one rec batch.
pub fn record_rec_loss<T: Scalar>(config: &ModelConfig, tape: &mut Tape<T>, p: &[Var], batch: &RecBatch) -> Result<Var, ModelError> {
    let (wu, wi) = config.rec_indices(batch.head)?;
    let users = batch.users.iter().map(|s| config.feature(tape, p, s)).collect::<Result<Vec<_>, _>>()?;
    let items = batch.items.iter().map(|s| config.feature(tape, p, s)).collect::<Result<Vec<_>, _>>()?;
    let zu: Vec<Var> = batch.user_of.iter().map(|&i| users[i]).collect();
    let zi: Vec<Var> = batch.item_of.iter().map(|&i| items[i]).collect();
    let zu = tape.concat_rows(&zu)?;
    let zi = tape.concat_rows(&zi)?;
    let logits = pair_logits(tape, p[wu], p[wi], zu, zi)?;
    Ok(tape.bce_with_logits(logits, &batch.labels)?)
}

/// `Σ_groups L1 + λ·Σ_heads L2`; a side with no data is left out entirely,
/// so a batch without rec pairs gives `L1` and one without LM text gives
/// `L2` (unweighted).
pub fn record_loss<T: Scalar>(
    config: &ModelConfig,
    tape: &mut Tape<T>,
    p: &[Var],
    batch: &StepBatch,
    lambda: f64,
) -> Result<LossVars, ModelError> {
    let lm = batch
        .lm
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| record_lm_loss(config, tape, p, g))
        .collect::<Result<Vec<_>, _>>()?;
    let rec = batch
        .rec
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| record_rec_loss(config, tape, p, b))
        .collect::<Result<Vec<_>, _>>()?;
    let l1 = fold_sum(tape, &lm)?;
    let l2 = fold_sum(tape, &rec)?;
    let total = match (l1, l2) {
        (Some(a), Some(b)) => {
            let weighted = tape.scale(b, lambda);
            tape.add(a, weighted)?
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(ModelError::Dim("empty batch".into())),
    };
    Ok(LossVars { total, l1, l2 })
}

/// The loss of a fixed batch as a function of all model parameters.
pub struct BatchObjective<'a> {
    pub config: &'a ModelConfig,
    pub batch: &'a StepBatch,
    pub lambda: f64,
}

impl Objective for BatchObjective<'_> {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var, NumericsError> {
        record_loss(self.config, tape, params, self.batch, self.lambda)
            .map(|l| l.total)
            .map_err(|e| match e {
                ModelError::Numerics(n) => n,
                other => NumericsError::Invalid(other.to_string()),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub grad_norm: f64,
    /// Tokens run through the LM objective (instrumentation).
    pub lm_tokens: usize,
    /// Pairs run through the rec objective (instrumentation).
    pub rec_pairs: usize,
}

/// Loss parts and gradients of one micro-batch.
pub fn batch_gradients(
    model: &Model,
    batch: &StepBatch,
    lambda: f64,
) -> Result<(StepStats, Vec<Tensor>), TrainError> {
    let config = model.config();
    let mut tape = Tape::<f64>::new();
    let p: Vec<Var> = model.params().iter().map(|t| tape.param(t.clone())).collect();
    let vars = record_loss(config, &mut tape, &p, batch, lambda)?;
    let stats = StepStats {
        loss: tape.scalar(vars.total),
        l1: vars.l1.map(|v| tape.scalar(v)),
        l2: vars.l2.map(|v| tape.scalar(v)),
        grad_norm: 0.0,
        lm_tokens: batch.lm.iter().flatten().map(|s| s.len()).sum(),
        rec_pairs: batch.rec.iter().map(|b| b.len()).sum(),
    };
    let grads = tape.backward(vars.total, false)?;
    let out = model
        .params()
        .iter()
        .zip(&p)
        .map(|(t, &v)| Tensor::new(t.shape().to_vec(), grads.get_or_zeros(v, t.len())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((stats, out))
}

// ---------------------------------------------------------------------------
// Loaders

/// Epoch-shuffled cursor over `0..n`, seeded per stream label.
#[derive(Clone, Debug)]
pub struct Loader {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    label: Vec<u8>,
}

impl Loader {
    pub fn new(n: usize, seed: u64, label: &str) -> Self {
        let mut l = Self {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            seed,
            label: label.as_bytes().to_vec(),
        };
        l.shuffle();
        l
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut rng_for(self.seed, &[b"loader", &self.label, &self.epoch.to_le_bytes()]));
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Error-diffusion schedule that assigns `b` of every `a + b` slots to the
/// secondary source, with the running count within one slot of exact.
#[derive(Clone, Debug)]
pub struct Mixer {
    primary: u64,
    secondary: u64,
    drawn: u64,
}

impl Mixer {
    pub fn new(primary: u32, secondary: u32) -> Self {
        Self {
            primary: primary as u64,
            secondary: secondary as u64,
            drawn: 0,
        }
    }

    /// Whether the next slot goes to the secondary source.
    pub fn next_is_secondary(&mut self) -> bool {
        let total = self.primary + self.secondary;
        let n = self.drawn;
        self.drawn += 1;
        (n + 1) * self.secondary / total > n * self.secondary / total
    }
}

/// A source of LM sequences: one corpus, optionally mixed with a second.
pub struct LmSource<'a> {
    corpus: &'a [Vec<TokenId>],
    loader: Loader,
    secondary: Option<(&'a [Vec<TokenId>], Loader, Mixer)>,
}

impl<'a> LmSource<'a> {
    pub fn new(corpus: &'a [Vec<TokenId>], seed: u64, label: &str) -> Self {
        Self {
            corpus,
            loader: Loader::new(corpus.len(), seed, label),
            secondary: None,
        }
    }

    pub fn mixed_with(mut self, other: &'a [Vec<TokenId>], ratio: (u32, u32), seed: u64, label: &str) -> Self {
        self.secondary = Some((other, Loader::new(other.len(), seed, label), Mixer::new(ratio.0, ratio.1)));
        self
    }

    /// Returns the sequence and whether it came from the secondary corpus.
    pub fn next_sequence(&mut self) -> (&'a [TokenId], bool) {
        if let Some((corpus, loader, mixer)) = &mut self.secondary {
            if mixer.next_is_secondary() {
                return (&corpus[loader.next_index()], true);
            }
        }
        (&self.corpus[self.loader.next_index()], false)
    }
}

/// A source of rec pairs for one task and head.
pub struct RecSource<'a> {
    task: &'a TaskData,
    head: usize,
    examples: Vec<(usize, usize)>,
    loader: Loader,
    train_sets: Vec<BTreeSet<usize>>,
    seed: u64,
    draws: u64,
}

impl<'a> RecSource<'a> {
    pub fn new(task: &'a TaskData, head: usize, seed: u64, label: &str) -> Self {
        let examples = task.rec_examples();
        Self {
            task,
            head,
            loader: Loader::new(examples.len(), seed, label),
            examples,
            train_sets: task.users.iter().map(|u| u.train_set()).collect(),
            seed: crate::util::derive_seed(seed, &[b"rec-negatives", label.as_bytes()]),
            draws: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `positives` training pairs, each followed by `negatives` sampled items.
    pub fn next_batch(&mut self, positives: usize, negatives: usize) -> Result<RecBatch, TrainError> {
        let mut batch = RecBatch::new(self.head);
        let mut seen = HashMap::new();
        for _ in 0..positives {
            let (u, j) = self.examples[self.loader.next_index()];
            let user = &self.task.users[u];
            let history = self.task.history_tokens(&user.train[..j])?;
            let target = user.train[j];
            let negs = sample_negatives(&user.user_id, negatives, self.task.n_items(), &self.train_sets[u], self.seed, self.draws)?;
            self.draws += 1;
            batch.push(history.clone(), target, &self.task.item_tokens[target], 1.0, &mut seen);
            for n in negs {
                batch.push(history.clone(), n, &self.task.item_tokens[n], 0.0, &mut seen);
            }
        }
        Ok(batch)
    }
}

// ---------------------------------------------------------------------------
// Validation

pub trait Validator {
    /// Validation loss of `model`; lower is better.
    fn validate(&mut self, model: &Model) -> Result<f64, TrainError>;
}

/// Mean BCE on held-out `(train history → validation item)` pairs with
/// fixed sampled negatives.
pub struct RecValidator {
    batch: RecBatch,
}

impl RecValidator {
    pub fn new(task: &TaskData, head: usize, max_users: usize, negatives: usize, seed: u64) -> Result<Self, TrainError> {
        let mut order: Vec<usize> = (0..task.users.len()).filter(|&u| task.users[u].val.is_some()).collect();
        order.shuffle(&mut rng_for(seed, &[b"val-users", task.name.as_bytes()]));
        order.truncate(max_users);
        order.sort_unstable();
        if order.is_empty() {
            return Err(TrainError::Data(format!("task {} has no validation items", task.name)));
        }
        let mut batch = RecBatch::new(head);
        let mut seen = HashMap::new();
        for u in order {
            let user = &task.users[u];
            let val = user.val.expect("filtered");
            let history = task.history_tokens(&user.train)?;
            batch.push(history.clone(), val, &task.item_tokens[val], 1.0, &mut seen);
            let negs = sample_negatives(&user.user_id, negatives, task.n_items(), &user.positives(), seed, u64::MAX)?;
            for n in negs {
                batch.push(history.clone(), n, &task.item_tokens[n], 0.0, &mut seen);
            }
        }
        Ok(Self { batch })
    }
}

impl Validator for RecValidator {
    fn validate(&mut self, model: &Model) -> Result<f64, TrainError> {
        let mut tape = Tape::<f64>::new();
        let p: Vec<Var> = model.params().iter().map(|t| tape.constant(t.clone())).collect();
        let loss = record_rec_loss(model.config(), &mut tape, &p, &self.batch)?;
        Ok(tape.scalar(loss))
    }
}

/// Mean next-token NLL over a fixed set of sequences.
pub struct LmValidator {
    seqs: Vec<Vec<TokenId>>,
}

impl LmValidator {
    pub fn new(seqs: Vec<Vec<TokenId>>) -> Result<Self, TrainError> {
        if seqs.is_empty() {
            return Err(TrainError::Data("no LM validation sequences".into()));
        }
        Ok(Self { seqs })
    }

    /// Histories ending with each user's validation item.
    pub fn for_task(task: &TaskData, max_users: usize) -> Result<Self, TrainError> {
        let seqs = task
            .users
            .iter()
            .filter_map(|u| u.val.map(|v| (u, v)))
            .take(max_users)
            .map(|(u, v)| {
                let mut items = u.train.clone();
                items.push(v);
                task.history_tokens(&items)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(seqs)
    }
}

impl Validator for LmValidator {
    fn validate(&mut self, model: &Model) -> Result<f64, TrainError> {
        let mut tape = Tape::<f64>::new();
        let p: Vec<Var> = model.params().iter().map(|t| tape.constant(t.clone())).collect();
        let loss = record_lm_loss(model.config(), &mut tape, &p, &self.seqs)?;
        Ok(tape.scalar(loss))
    }
}

/// Sum of several validators.
pub struct SumValidator(pub Vec<Box<dyn Validator>>);

impl Validator for SumValidator {
    fn validate(&mut self, model: &Model) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for v in &mut self.0 {
            total += v.validate(model)?;
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Engine

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub lambda: f64,
    pub lr: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

pub fn write_log(records: &[LogRecord], path: &Path) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters restored to the best validation evaluation.
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub best_step: u64,
    pub best_val: f64,
    pub steps_run: u64,
    pub stopped_early: bool,
    /// Per-step statistics of the last step (instrumentation).
    pub last_step: Option<StepStats>,
}

/// Runs the optimizer over LM and rec sources: each step draws
/// `lm_batch_size` sequences from every LM source (one loss group each) and
/// `rec_batch_size` positives from every rec source, then applies
/// `Σ L1 + λ(step)·Σ L2`, clipping and AdamW.
pub fn run_steps(
    mut model: Model,
    lm_sources: &mut [LmSource<'_>],
    rec_sources: &mut [RecSource<'_>],
    plan: &TrainPlan,
    validator: &mut dyn Validator,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    if lm_sources.is_empty() && rec_sources.is_empty() {
        return Err(TrainError::Data("nothing to train on".into()));
    }
    for s in lm_sources.iter() {
        if s.corpus.is_empty() {
            return Err(TrainError::Data("empty LM corpus".into()));
        }
    }
    for s in rec_sources.iter() {
        if s.is_empty() {
            return Err(TrainError::Data(format!("task {} has no training pairs", s.task.name)));
        }
        model.config().rec_indices(s.head)?;
    }
    let start = Instant::now();
    let mut opt = AdamW::new(model.params());
    let mut best = (f64::INFINITY, 0u64, model.params().to_vec());
    let mut since_best = 0u64;
    let mut log = Vec::new();
    let mut last = None;
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 1..=plan.total_steps {
        let lambda = lambda_schedule(step - 1, plan.total_steps, plan.lambda0, plan.lambda_floor);
        let lr = lr_schedule(step, plan.total_steps, plan.peak_lr, plan.warmup_fraction);
        let mut grads: Option<Vec<Tensor>> = None;
        let mut stats: Option<StepStats> = None;
        for _ in 0..plan.grad_accum {
            let batch = StepBatch {
                lm: lm_sources
                    .iter_mut()
                    .map(|s| (0..plan.lm_batch_size).map(|_| s.next_sequence().0.to_vec()).collect())
                    .collect(),
                rec: rec_sources
                    .iter_mut()
                    .map(|s| s.next_batch(plan.rec_batch_size, plan.negatives_per_positive))
                    .collect::<Result<_, _>>()?,
            };
            let (s, g) = batch_gradients(&model, &batch, lambda)?;
            if !s.loss.is_finite() {
                return Err(TrainError::NonFinite { step, what: "loss".into() });
            }
            accumulate(&mut grads, g);
            stats = Some(match stats {
                None => s,
                Some(acc) => StepStats {
                    loss: acc.loss + s.loss,
                    l1: acc.l1.zip(s.l1).map(|(a, b)| a + b),
                    l2: acc.l2.zip(s.l2).map(|(a, b)| a + b),
                    grad_norm: 0.0,
                    lm_tokens: acc.lm_tokens + s.lm_tokens,
                    rec_pairs: acc.rec_pairs + s.rec_pairs,
                },
            });
        }
        let mut grads = grads.expect("grad_accum > 0");
        let mut stats = stats.expect("grad_accum > 0");
        if plan.grad_accum > 1 {
            let k = plan.grad_accum as f64;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x /= k;
                }
            }
            stats.loss /= k;
            stats.l1 = stats.l1.map(|x| x / k);
            stats.l2 = stats.l2.map(|x| x / k);
        }
        stats.grad_norm = clip_gradients(&mut grads, plan.clip_norm);
        opt.step(model.params_mut(), &grads, lr, plan.weight_decay)
            .map_err(|e| match e {
                TrainError::NonFinite { what, .. } => TrainError::NonFinite { step, what },
                other => other,
            })?;
        steps_run = step;
        if step % plan.eval_interval == 0 || step == plan.total_steps {
            let val = validator.validate(&model)?;
            log.push(LogRecord {
                step,
                loss: stats.loss,
                l1: stats.l1,
                l2: stats.l2,
                lambda,
                lr,
                val_loss: val,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            if val < best.0 {
                best = (val, step, model.params().to_vec());
                since_best = 0;
            } else {
                since_best += 1;
            }
            log::debug!("step {step} loss {:.5} val {val:.5}", stats.loss);
            if since_best >= plan.patience {
                stopped_early = true;
                last = Some(stats);
                break;
            }
        }
        last = Some(stats);
    }
    let (best_val, best_step, params) = best;
    if best_step > 0 {
        for (dst, src) in model.params_mut().iter_mut().zip(params) {
            *dst = src;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        best_step,
        best_val,
        steps_run,
        stopped_early,
        last_step: last,
    })
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(g) {
                for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                    *p += q;
                }
            }
        }
    }
}

/// Stream labels shared with multi-task pretraining so that a single task
/// yields the same batches either way.
pub fn lm_label(task: usize) -> String {
    format!("lm/{task}")
}

pub fn rec_label(task: usize) -> String {
    format!("rec/{task}")
}

pub const AGNOSTIC_LABEL: &str = "lm-agnostic";

/// The default validator for `plan.mode` on `task`.
pub fn default_validator(task: &TaskData, plan: &TrainPlan) -> Result<Box<dyn Validator>, TrainError> {
    Ok(if plan.mode.uses_rec() {
        Box::new(RecValidator::new(task, 0, plan.val_users, plan.negatives_per_positive, plan.seed)?)
    } else {
        Box::new(LmValidator::for_task(task, plan.val_users)?)
    })
}

/// Trains one task under `plan.mode`; `agnostic` text is mixed into the LM
/// batches only in `joint_plus_agnostic`.
pub fn train(model: Model, task: &TaskData, agnostic: &[Vec<TokenId>], plan: &TrainPlan) -> Result<TrainOutcome, TrainError> {
    let mut validator = default_validator(task, plan)?;
    train_with_validator(model, task, agnostic, plan, validator.as_mut())
}

pub fn train_with_validator(
    model: Model,
    task: &TaskData,
    agnostic: &[Vec<TokenId>],
    plan: &TrainPlan,
    validator: &mut dyn Validator,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    if plan.mode == Mode::JointPlusAgnostic && agnostic.is_empty() {
        return Err(TrainError::Data("joint_plus_agnostic needs task-agnostic text".into()));
    }
    let mut lm = Vec::new();
    if plan.mode.uses_lm() {
        let mut src = LmSource::new(&task.lm_corpus, plan.seed, &lm_label(0));
        if plan.mode == Mode::JointPlusAgnostic {
            src = src.mixed_with(agnostic, plan.mix_ratio, plan.seed, AGNOSTIC_LABEL);
        }
        lm.push(src);
    }
    let mut rec = Vec::new();
    if plan.mode.uses_rec() {
        rec.push(RecSource::new(task, 0, plan.seed, &rec_label(0)));
    }
    run_steps(model, &mut lm, &mut rec, plan, validator)
}
