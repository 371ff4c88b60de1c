//! Multi-task pretraining, frozen-backbone feature tables, feature
//! combination across services and linear probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbpe::TokenId;
use crate::model::{pair_logits, Model, ModelError};
use crate::numerics::{Tape, Tensor, Var};
use crate::training::{
    clip_gradients, lm_label, lr_schedule, rec_label, run_steps, sample_negatives, AdamW, LmSource, LmValidator, Loader,
    RecSource, RecValidator, SumValidator, TaskData, TrainError, TrainOutcome, TrainPlan, Validator, AGNOSTIC_LABEL,
};
use crate::util::rng_for;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("target task {0:?} must not be among the pretraining tasks")]
    TargetInPretraining(String),
    #[error("model has {have} rec heads, pretraining needs {need}")]
    HeadCount { have: usize, need: usize },
    #[error("feature dimension mismatch: {0}")]
    Dim(String),
    #[error("users absent from every feature table: {0:?}")]
    MissingUsers(Vec<String>),
    #[error("no feature for {0:?}")]
    MissingId(String),
    #[error("invalid id {0:?}: ids may not contain tabs or newlines")]
    BadId(String),
    #[error("feature table: {0}")]
    Format(String),
    #[error("nothing to pretrain on")]
    NoData,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizes `Σ_t L1ᵗ + λ·Σ_{t∈specific} L2ᵗ` over every specific task and
/// agnostic corpus with one shared decoder and an independent rec head per
/// specific task (head `t` for `specific[t]`). With one specific task and no
/// agnostic corpora the batches, losses and updates coincide with
/// [`crate::training::train`] in joint mode.
pub fn pretrain_multitask(
    model: Model,
    specific: &[&TaskData],
    agnostic: &[&[Vec<TokenId>]],
    target_task: &str,
    plan: &TrainPlan,
) -> Result<TrainOutcome, TransferError> {
    if let Some(t) = specific.iter().find(|t| t.name == target_task) {
        return Err(TransferError::TargetInPretraining(t.name.clone()));
    }
    if specific.is_empty() && agnostic.is_empty() {
        return Err(TransferError::NoData);
    }
    if model.config().rec_heads < specific.len() {
        return Err(TransferError::HeadCount {
            have: model.config().rec_heads,
            need: specific.len(),
        });
    }
    let mut lm: Vec<LmSource> = specific
        .iter()
        .enumerate()
        .map(|(t, task)| LmSource::new(&task.lm_corpus, plan.seed, &lm_label(t)))
        .collect();
    lm.extend(
        agnostic
            .iter()
            .enumerate()
            .map(|(k, corpus)| LmSource::new(corpus, plan.seed, &format!("{AGNOSTIC_LABEL}/{k}"))),
    );
    let mut rec: Vec<RecSource> = specific
        .iter()
        .enumerate()
        .map(|(t, task)| RecSource::new(task, t, plan.seed, &rec_label(t)))
        .collect();
    let mut validator: Box<dyn Validator> = if specific.is_empty() {
        let seqs: Vec<Vec<TokenId>> = agnostic.iter().flat_map(|c| c.iter().take(plan.val_users).cloned()).collect();
        Box::new(LmValidator::new(seqs)?)
    } else {
        Box::new(SumValidator(
            specific
                .iter()
                .enumerate()
                .map(|(t, task)| {
                    RecValidator::new(task, t, plan.val_users, plan.negatives_per_positive, plan.seed)
                        .map(|v| Box::new(v) as Box<dyn Validator>)
                })
                .collect::<Result<_, _>>()?,
        ))
    };
    let mut plan = plan.clone();
    if specific.is_empty() {
        plan.mode = crate::training::Mode::LmOnly;
    }
    Ok(run_steps(model, &mut lm, &mut rec, &plan, validator.as_mut())?)
}

// ---------------------------------------------------------------------------
// Feature tables

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    /// Produced from an empty history (the end-marker-only sequence).
    pub cold: bool,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub d: usize,
    pub provenance: String,
    pub checkpoint_hash: String,
    pub rows: BTreeMap<String, FeatureRow>,
}

const TABLE_MAGIC: &str = "# feature-table v1";

fn check_id(id: &str) -> Result<(), TransferError> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(TransferError::BadId(id.to_string()));
    }
    Ok(())
}

impl FeatureTable {
    pub fn new(d: usize, provenance: impl Into<String>, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            d,
            provenance: provenance.into(),
            checkpoint_hash: checkpoint_hash.into(),
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, row: FeatureRow) -> Result<(), TransferError> {
        let id = id.into();
        check_id(&id)?;
        if row.vector.len() != self.d {
            return Err(TransferError::Dim(format!("{id}: {} values, table width {}", row.vector.len(), self.d)));
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64], TransferError> {
        self.rows
            .get(id)
            .map(|r| r.vector.as_slice())
            .ok_or_else(|| TransferError::MissingId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Tab-separated text: magic line, `d`, `provenance` and `checkpoint`
    /// header lines, then `id  cold  v₁ … v_d` per row. Values use the
    /// shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TABLE_MAGIC}").unwrap();
        writeln!(s, "d\t{}", self.d).unwrap();
        writeln!(s, "provenance\t{}", self.provenance).unwrap();
        writeln!(s, "checkpoint\t{}", self.checkpoint_hash).unwrap();
        for (id, row) in &self.rows {
            write!(s, "{id}\t{}", u8::from(row.cold)).unwrap();
            for x in &row.vector {
                write!(s, "\t{x:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TransferError> {
        let bad = |m: String| TransferError::Format(m);
        let mut lines = text.lines();
        if lines.next() != Some(TABLE_MAGIC) {
            return Err(bad("missing header line".into()));
        }
        let mut field = |name: &str| -> Result<String, TransferError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {name} line")))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix('\t'))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {name} line, got {line:?}")))
        };
        let d: usize = field("d")?.parse().map_err(|e| bad(format!("d: {e}")))?;
        let provenance = field("provenance")?;
        let checkpoint = field("checkpoint")?;
        let mut table = Self::new(d, provenance, checkpoint);
        for (n, line) in lines.filter(|l| !l.starts_with('#')).enumerate() {
            let mut parts = line.split('\t');
            let id = parts.next().unwrap_or_default();
            let cold = match parts.next() {
                Some("0") => false,
                Some("1") => true,
                other => return Err(bad(format!("row {}: bad cold flag {other:?}", n + 1))),
            };
            let vector = parts
                .map(|p| p.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", n + 1))))
                .collect::<Result<Vec<_>, _>>()?;
            table.insert(id, FeatureRow { cold, vector })?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), TransferError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TransferError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// One frozen forward per input. An empty sequence marks a cold id, which
/// gets the feature of the bare end-of-history token.
pub fn extract_features(
    model: &Model,
    checkpoint_hash: &str,
    inputs: &[(String, Vec<TokenId>)],
    provenance: &str,
) -> Result<FeatureTable, TransferError> {
    let eoh = model.config().eoh_id;
    let mut cold_feature: Option<Vec<f64>> = None;
    let mut table = FeatureTable::new(model.config().d_emb, provenance, checkpoint_hash);
    for (id, ids) in inputs {
        let row = if ids.is_empty() {
            if cold_feature.is_none() {
                cold_feature = Some(model.extract_feature(&[eoh])?);
            }
            FeatureRow {
                cold: true,
                vector: cold_feature.clone().expect("set above"),
            }
        } else {
            FeatureRow {
                cold: false,
                vector: model.extract_feature(ids)?,
            }
        };
        table.insert(id.clone(), row)?;
    }
    Ok(table)
}

/// Which of a user's items form the history text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryScope {
    /// Training items only (validation item is the target).
    Train,
    /// Training and validation items (test item is the target).
    TrainVal,
}

/// `(user id, history tokens)` for every user of `task`.
pub fn user_inputs(task: &TaskData, scope: HistoryScope) -> Result<Vec<(String, Vec<TokenId>)>, TransferError> {
    task.users
        .iter()
        .map(|u| {
            let mut items = u.train.clone();
            if scope == HistoryScope::TrainVal {
                items.extend(u.val);
            }
            let tokens = if items.is_empty() { Vec::new() } else { task.history_tokens(&items)? };
            Ok((u.user_id.clone(), tokens))
        })
        .collect()
}

/// `(item id, item tokens)` for every item of `task`.
pub fn item_inputs(task: &TaskData) -> Vec<(String, Vec<TokenId>)> {
    task.item_ids.iter().cloned().zip(task.item_tokens.iter().cloned()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Element-wise mean over the provenances that hold the user.
    MeanPool,
    /// Histories were concatenated before extraction; the single table
    /// passes through.
    CombineInputs,
}

/// Per-user combination of a task-specific table with task-agnostic ones.
///
/// Under `MeanPool` cold rows only count when the user has no warm row in
/// any table.
pub fn combine_features(
    specific: &FeatureTable,
    agnostic: &[FeatureTable],
    users: &[String],
    mode: CombineMode,
) -> Result<FeatureTable, TransferError> {
    for t in agnostic {
        if t.d != specific.d {
            return Err(TransferError::Dim(format!("{} has width {}, {} has {}", t.provenance, t.d, specific.provenance, specific.d)));
        }
    }
    let tables: Vec<&FeatureTable> = match mode {
        CombineMode::MeanPool => std::iter::once(specific).chain(agnostic).collect(),
        CombineMode::CombineInputs => vec![specific],
    };
    let missing: Vec<String> = users
        .iter()
        .filter(|u| tables.iter().all(|t| !t.rows.contains_key(*u)))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(TransferError::MissingUsers(missing));
    }
    if mode == CombineMode::CombineInputs {
        let mut out = FeatureTable::new(specific.d, specific.provenance.clone(), specific.checkpoint_hash.clone());
        for u in users {
            out.insert(u.clone(), specific.rows[u].clone())?;
        }
        return Ok(out);
    }
    let provenance = format!(
        "mean_pool({})",
        tables.iter().map(|t| t.provenance.as_str()).collect::<Vec<_>>().join("+")
    );
    let mut out = FeatureTable::new(specific.d, provenance, specific.checkpoint_hash.clone());
    for u in users {
        let rows: Vec<&FeatureRow> = tables.iter().filter_map(|t| t.rows.get(u)).collect();
        let warm: Vec<&FeatureRow> = rows.iter().copied().filter(|r| !r.cold).collect();
        let (pool, cold) = if warm.is_empty() { (rows, true) } else { (warm, false) };
        let mut v = vec![0.0; specific.d];
        for r in &pool {
            for (a, b) in v.iter_mut().zip(&r.vector) {
                *a += b;
            }
        }
        let n = pool.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        out.insert(u.clone(), FeatureRow { cold, vector: v })?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear probes

/// Downstream `(W_u, W_i)`, separate from any pretraining head.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub w_user: Tensor,
    pub w_item: Tensor,
}

impl ProbeParams {
    /// `W_u = 0`, `W_i = I`: every initial score is exactly 0.5.
    pub fn init(d: usize) -> Self {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        Self {
            w_user: Tensor::zeros(&[d, d]),
            w_item: eye,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.w_user.len() + self.w_item.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbePlan {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Sampled negatives per positive when building probe pairs.
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for ProbePlan {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            peak_lr: 1e-2,
            weight_decay: 0.0,
            warmup_fraction: 0.01,
            clip_norm: 0.1,
            negatives_per_positive: 4,
            seed: 0,
        }
    }
}

/// A labeled `(user, item, label)` pair.
pub type LabeledPair = (String, String, f64);

/// Probe training pairs: each user's validation item as a positive plus
/// sampled items outside all of the user's positives.
pub fn probe_pairs(task: &TaskData, negatives: usize, seed: u64) -> Result<Vec<LabeledPair>, TransferError> {
    let mut out = Vec::new();
    for (u, user) in task.users.iter().enumerate() {
        let Some(val) = user.val else { continue };
        out.push((user.user_id.clone(), task.item_ids[val].clone(), 1.0));
        for n in sample_negatives(&user.user_id, negatives, task.n_items(), &user.positives(), seed, u as u64)? {
            out.push((user.user_id.clone(), task.item_ids[n].clone(), 0.0));
        }
    }
    Ok(out)
}

/// Mean BCE of the probe over `pairs`.
pub fn probe_loss(
    probe: &ProbeParams,
    users: &FeatureTable,
    items: &FeatureTable,
    pairs: &[LabeledPair],
) -> Result<f64, TransferError> {
    let mut tape = Tape::<f64>::new();
    let (wu, wi) = (tape.constant(probe.w_user.clone()), tape.constant(probe.w_item.clone()));
    let loss = record_probe_loss(&mut tape, wu, wi, users, items, pairs)?;
    Ok(tape.scalar(loss))
}

fn record_probe_loss(
    tape: &mut Tape<f64>,
    wu: Var,
    wi: Var,
    users: &FeatureTable,
    items: &FeatureTable,
    pairs: &[LabeledPair],
) -> Result<Var, TransferError> {
    let d = users.d;
    let mut zu = Vec::with_capacity(pairs.len() * d);
    let mut zi = Vec::with_capacity(pairs.len() * d);
    let mut labels = Vec::with_capacity(pairs.len());
    for (u, i, y) in pairs {
        zu.extend_from_slice(users.get(u)?);
        zi.extend_from_slice(items.get(i)?);
        labels.push(*y);
    }
    let zu = tape.constant(Tensor::matrix(pairs.len(), d, zu).map_err(ModelError::from)?);
    let zi = tape.constant(Tensor::matrix(pairs.len(), d, zi).map_err(ModelError::from)?);
    let logits = pair_logits(tape, wu, wi, zu, zi)?;
    Ok(tape.bce_with_logits(logits, &labels).map_err(ModelError::from)?)
}

/// Fits `(W_u, W_i)` on frozen features with AdamW, warmup plus cosine
/// decay and gradient clipping. Nothing but the returned probe changes.
pub fn train_linear_probe(
    users: &FeatureTable,
    items: &FeatureTable,
    pairs: &[LabeledPair],
    plan: &ProbePlan,
) -> Result<ProbeParams, TransferError> {
    if users.d != items.d {
        return Err(TransferError::Dim(format!("user width {} vs item width {}", users.d, items.d)));
    }
    if pairs.is_empty() || plan.batch_size == 0 || plan.steps == 0 {
        return Err(TransferError::Train(TrainError::Plan("probe needs pairs, batch_size and steps".into())));
    }
    for (u, i, _) in pairs {
        users.get(u)?;
        items.get(i)?;
    }
    let mut probe = ProbeParams::init(users.d);
    let mut params = vec![probe.w_user.clone(), probe.w_item.clone()];
    let mut opt = AdamW::new(&params);
    let mut loader = Loader::new(pairs.len(), plan.seed, "probe");
    let mut batch = Vec::with_capacity(plan.batch_size);
    for step in 1..=plan.steps {
        batch.clear();
        batch.extend((0..plan.batch_size.min(pairs.len())).map(|_| pairs[loader.next_index()].clone()));
        let mut tape = Tape::<f64>::new();
        let (wu, wi) = (tape.param(params[0].clone()), tape.param(params[1].clone()));
        let loss = record_probe_loss(&mut tape, wu, wi, users, items, &batch)?;
        if !tape.scalar(loss).is_finite() {
            return Err(TrainError::NonFinite { step, what: "probe loss".into() }.into());
        }
        let g = tape.backward(loss, false).map_err(ModelError::from)?;
        let mut grads = vec![
            Tensor::new(params[0].shape().to_vec(), g.get_or_zeros(wu, params[0].len())).map_err(ModelError::from)?,
            Tensor::new(params[1].shape().to_vec(), g.get_or_zeros(wi, params[1].len())).map_err(ModelError::from)?,
        ];
        clip_gradients(&mut grads, plan.clip_norm);
        let lr = lr_schedule(step, plan.steps, plan.peak_lr, plan.warmup_fraction);
        opt.step(&mut params, &grads, lr, plan.weight_decay)?;
    }
    probe.w_item = params.pop().expect("two tensors");
    probe.w_user = params.pop().expect("two tensors");
    Ok(probe)
}

/// Fraction of pairs whose predicted label (`logit > 0`) matches.
pub fn probe_accuracy(
    probe: &ProbeParams,
    users: &FeatureTable,
    items: &FeatureTable,
    pairs: &[LabeledPair],
) -> Result<f64, TransferError> {
    let mut correct = 0usize;
    for (u, i, y) in pairs {
        let x = crate::model::pair_logit(users.get(u)?, items.get(i)?, &probe.w_user, &probe.w_item)?;
        if (x > 0.0) == (*y > 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

/// Text encoding of a probe: `d` then `W_u` and `W_i` rows.
pub fn probe_to_text(probe: &ProbeParams) -> String {
    let d = probe.w_user.shape()[0];
    let mut s = format!("# probe v1\nd\t{d}\n");
    for w in [&probe.w_user, &probe.w_item] {
        for row in w.data().chunks(d) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
    }
    s
}

pub fn probe_from_text(text: &str) -> Result<ProbeParams, TransferError> {
    let bad = |m: &str| TransferError::Format(m.to_string());
    let mut lines = text.lines();
    if lines.next() != Some("# probe v1") {
        return Err(bad("missing probe header"));
    }
    let d: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("d\t"))
        .and_then(|x| x.parse().ok())
        .ok_or_else(|| bad("missing d line"))?;
    let values = lines
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split('\t'))
        .map(|x| x.parse::<f64>().map_err(|_| bad("bad number")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != 2 * d * d {
        return Err(bad("wrong number of values"));
    }
    Ok(ProbeParams {
        w_user: Tensor::matrix(d, d, values[..d * d].to_vec()).map_err(ModelError::from)?,
        w_item: Tensor::matrix(d, d, values[d * d..].to_vec()).map_err(ModelError::from)?,
    })
}

/// Random unit-norm features with labels `sign(z_u·z_i)`, for probe tests.
pub fn separable_features(n_users: usize, n_items: usize, d: usize, seed: u64) -> (FeatureTable, FeatureTable, Vec<LabeledPair>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng_for(seed, &[b"separable"]);
    let mut draw = |prefix: &str, n: usize| {
        let mut t = FeatureTable::new(d, "synthetic", "none");
        for k in 0..n {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            t.insert(format!("{prefix}{k}"), FeatureRow {
                cold: false,
                vector: v.iter().map(|x| x / norm).collect(),
            })
            .expect("valid id");
        }
        t
    };
    let users = draw("u", n_users);
    let items = draw("i", n_items);
    let mut pairs = Vec::new();
    for (u, ur) in &users.rows {
        for (i, ir) in &items.rows {
            let dot: f64 = ur.vector.iter().zip(&ir.vector).map(|(a, b)| a * b).sum();
            if dot.abs() > 0.05 {
                pairs.push((u.clone(), i.clone(), if dot > 0.0 { 1.0 } else { 0.0 }));
            }
        }
    }
    (users, items, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbpe::{Vocab, DEFAULT_SPECIALS};
    use crate::corpus::{generate_service, leave_one_out, synthetic_world, DatasetKind, GenConfig, ServiceSpec};
    use crate::model::ModelConfig;
    use crate::training::{batch_gradients, train, Mode, RecBatch, StepBatch};

    fn row(v: &[f64]) -> FeatureRow {
        FeatureRow {
            cold: false,
            vector: v.to_vec(),
        }
    }

    fn table(prov: &str, rows: &[(&str, FeatureRow)]) -> FeatureTable {
        let mut t = FeatureTable::new(2, prov, "h");
        for (id, r) in rows {
            t.insert(*id, r.clone()).unwrap();
        }
        t
    }

    #[test]
    fn table_text_round_trip_is_lossless() {
        let mut t = FeatureTable::new(3, "shop/train", "abc123");
        t.insert("u1", row(&[0.1, -1.0 / 3.0, 1e-300])).unwrap();
        t.insert("u2", FeatureRow {
            cold: true,
            vector: vec![f64::MAX, -0.0, 2.5e-8],
        })
        .unwrap();
        let back = FeatureTable::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        assert!(t.insert("bad\tid", row(&[0.0; 3])).is_err());
        assert!(t.insert("short", row(&[0.0; 2])).is_err());
        assert!(FeatureTable::from_text("nonsense").is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let users = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let s = table("s", &[("a", row(&[1.0, 2.0])), ("b", row(&[3.0, -1.0])), ("c", FeatureRow {
            cold: true,
            vector: vec![9.0, 9.0],
        })]);
        let ag = table("g", &[("a", row(&[1.0, 2.0])), ("b", row(&[-3.0, 1.0])), ("c", row(&[0.5, 0.25]))]);
        let out = combine_features(&s, &[ag], &users, CombineMode::MeanPool).unwrap();
        assert_eq!(out.get("a").unwrap(), &[1.0, 2.0]);
        assert_eq!(out.get("b").unwrap(), &[0.0, 0.0]);
        // cold specific row is skipped in favor of the agnostic feature
        assert_eq!(out.get("c").unwrap(), &[0.5, 0.25]);
        assert!(!out.rows["c"].cold);
    }

    #[test]
    fn user_only_in_agnostic_tables() {
        let s = table("s", &[("a", row(&[1.0, 1.0]))]);
        let g1 = table("g1", &[("z", row(&[2.0, 0.0]))]);
        let g2 = table("g2", &[("z", row(&[0.0, 4.0]))]);
        let users = vec!["a".to_string(), "z".to_string()];
        let out = combine_features(&s, &[g1, g2], &users, CombineMode::MeanPool).unwrap();
        assert_eq!(out.get("z").unwrap(), &[1.0, 2.0]);
        let err = combine_features(&s, &[], &["q".to_string()], CombineMode::MeanPool).unwrap_err();
        assert!(err.to_string().contains("\"q\""));
    }

    #[test]
    fn combine_inputs_passes_through() {
        let s = table("s+g", &[("a", row(&[1.0, 1.0]))]);
        let out = combine_features(&s, &[], &["a".to_string()], CombineMode::CombineInputs).unwrap();
        assert_eq!(out.rows, s.rows);
    }

    #[test]
    fn probe_init_gives_half_and_ln2() {
        let (u, i, pairs) = separable_features(5, 6, 4, 1);
        let p = ProbeParams::init(4);
        assert_eq!(p.trainable_count(), 2 * 4 * 4);
        for (a, b, _) in &pairs {
            assert_eq!(crate::model::score_pair(u.get(a).unwrap(), i.get(b).unwrap(), &p.w_user, &p.w_item).unwrap(), 0.5);
        }
        assert!((probe_loss(&p, &u, &i, &pairs).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn probe_separates_constructed_features() {
        let (u, i, pairs) = separable_features(30, 30, 6, 2);
        let plan = ProbePlan {
            steps: 400,
            batch_size: 128,
            peak_lr: 0.05,
            ..ProbePlan::default()
        };
        let p = train_linear_probe(&u, &i, &pairs, &plan).unwrap();
        let acc = probe_accuracy(&p, &u, &i, &pairs).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn probe_text_round_trip() {
        let (u, i, pairs) = separable_features(4, 4, 3, 3);
        let p = train_linear_probe(&u, &i, &pairs, &ProbePlan {
            steps: 5,
            ..ProbePlan::default()
        })
        .unwrap();
        assert_eq!(probe_from_text(&probe_to_text(&p)).unwrap(), p);
    }

    fn two_service_world(seed: u64) -> (Vocab, TaskData, TaskData) {
        let config = GenConfig {
            n_users: 20,
            n_items: 30,
            n_topics: 3,
            history_len_range: (4, 6),
            vocab_words_per_topic: 4,
            words_per_item: 2,
            seed,
            service: "unused".into(),
        };
        let world = synthetic_world(&config).unwrap();
        let vocab = Vocab::bytes_only(&DEFAULT_SPECIALS).unwrap();
        let mk = |name: &str| {
            let ds = generate_service(&world, &config, &ServiceSpec {
                name: name.into(),
                kind: DatasetKind::Specific,
                n_items: 30,
                history_len_range: (4, 6),
            })
            .unwrap();
            TaskData::from_leave_one_out(&ds, &leave_one_out(&ds).unwrap(), &vocab, 48, 16).unwrap()
        };
        let (a, b) = (mk("alpha"), mk("beta"));
        (vocab, a, b)
    }

    fn plan() -> TrainPlan {
        TrainPlan {
            mode: Mode::Joint,
            lm_batch_size: 2,
            rec_batch_size: 2,
            total_steps: 4,
            eval_interval: 2,
            val_users: 4,
            peak_lr: 1e-2,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn single_task_pretraining_is_joint_training() {
        let (vocab, a, _) = two_service_world(1);
        let model = Model::init(ModelConfig::for_vocab(&vocab, 1, 8, 2, 16, 48).unwrap(), 3).unwrap();
        let joint = train(model.clone(), &a, &[], &plan()).unwrap();
        let multi = pretrain_multitask(model, &[&a], &[], "target", &plan()).unwrap();
        assert_eq!(joint.model, multi.model);
        let strip = |o: &TrainOutcome| o.log.iter().map(|r| (r.step, r.loss, r.l1, r.l2, r.val_loss)).collect::<Vec<_>>();
        assert_eq!(strip(&joint), strip(&multi));
    }

    #[test]
    fn pretraining_rejects_the_target_task() {
        let (vocab, a, _) = two_service_world(1);
        let model = Model::init(ModelConfig::for_vocab(&vocab, 1, 8, 2, 16, 48).unwrap(), 3).unwrap();
        assert!(matches!(
            pretrain_multitask(model, &[&a], &[], "alpha", &plan()),
            Err(TransferError::TargetInPretraining(_))
        ));
    }

    #[test]
    fn agnostic_only_pretraining_is_pure_lm() {
        let (vocab, a, _) = two_service_world(2);
        let model = Model::init(ModelConfig::for_vocab(&vocab, 1, 8, 2, 16, 48).unwrap(), 3).unwrap();
        let out = pretrain_multitask(model, &[], &[&a.lm_corpus], "x", &plan()).unwrap();
        assert!(out.log.iter().all(|r| r.l2.is_none() && r.l1.is_some()));
    }

    #[test]
    fn rec_heads_only_see_their_own_task() {
        let (vocab, a, b) = two_service_world(3);
        let mut config = ModelConfig::for_vocab(&vocab, 1, 8, 2, 16, 48).unwrap();
        config.rec_heads = 2;
        let model = Model::init(config.clone(), 4).unwrap();
        let mut sa = RecSource::new(&a, 0, 0, "a");
        let mut sb = RecSource::new(&b, 1, 0, "b");
        let (h0, h1) = (config.rec_indices(0).unwrap(), config.rec_indices(1).unwrap());
        let norm = |g: &[Tensor], (u, i): (usize, usize)| g[u].sq_norm() + g[i].sq_norm();
        let only_a = StepBatch {
            lm: vec![],
            rec: vec![sa.next_batch(2, 1).unwrap()],
        };
        let (_, g) = batch_gradients(&model, &only_a, 1.0).unwrap();
        assert!(norm(&g, h0) > 0.0 && norm(&g, h1) == 0.0);
        let only_b = StepBatch {
            lm: vec![],
            rec: vec![RecBatch::new(0), sb.next_batch(2, 1).unwrap()],
        };
        let (_, g) = batch_gradients(&model, &only_b, 1.0).unwrap();
        assert!(norm(&g, h0) == 0.0 && norm(&g, h1) > 0.0);
    }

    #[test]
    fn extraction_is_frozen_deterministic_and_order_free() {
        let (vocab, a, _) = two_service_world(4);
        let model = Model::init(ModelConfig::for_vocab(&vocab, 1, 8, 2, 16, 48).unwrap(), 5).unwrap();
        let before = model.hash();
        let mut inputs = user_inputs(&a, HistoryScope::Train).unwrap();
        inputs.push(("cold-user".into(), vec![]));
        let t1 = extract_features(&model, "h", &inputs, "alpha/train").unwrap();
        inputs.reverse();
        let t2 = extract_features(&model, "h", &inputs, "alpha/train").unwrap();
        assert_eq!(t1, t2);
        assert_eq!(model.hash(), before);
        assert!(t1.rows["cold-user"].cold);
        assert_eq!(t1.rows["cold-user"].vector, model.extract_feature(&[vocab.eoh().unwrap()]).unwrap());
        let other = Model::init(model.config().clone(), 6).unwrap();
        let t3 = extract_features(&other, "h2", &inputs, "alpha/train").unwrap();
        let u = &a.users[0].user_id;
        let dist: f64 = t1.get(u).unwrap().iter().zip(t3.get(u).unwrap()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn probe_leaves_the_backbone_alone() {
        let (vocab, a, _) = two_service_world(5);
        let model = Model::init(ModelConfig::for_vocab(&vocab, 1, 8, 2, 16, 48).unwrap(), 5).unwrap();
        let (mh, vh) = (model.hash(), vocab.hash());
        let users = extract_features(&model, "h", &user_inputs(&a, HistoryScope::Train).unwrap(), "u").unwrap();
        let items = extract_features(&model, "h", &item_inputs(&a), "i").unwrap();
        let pairs = probe_pairs(&a, 2, 0).unwrap();
        train_linear_probe(&users, &items, &pairs, &ProbePlan {
            steps: 10,
            ..ProbePlan::default()
        })
        .unwrap();
        assert_eq!(model.hash(), mh);
        assert_eq!(vocab.hash(), vh);
    }
}
