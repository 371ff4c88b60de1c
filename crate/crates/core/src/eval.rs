//! Ranking metrics and the sampled and full-catalog evaluation protocols.
//!
//! Ties are always broken against the ground-truth item: every competitor
//! scoring at least as high ranks ahead of it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{transform, Model, ModelError};
use crate::numerics::Tensor;
use crate::training::{sample_negatives, TaskData, TrainError};
use crate::transfer::{extract_features, item_inputs, user_inputs, FeatureTable, HistoryScope, ProbeParams, TransferError};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth {0:?} is not among the candidates")]
    MissingGroundTruth(String),
    #[error("ground truth {0:?} appears more than once among the candidates")]
    DuplicateGroundTruth(String),
    #[error("score for {0:?} is NaN")]
    NanScore(String),
    #[error("k must be at least 1, got {0}")]
    BadK(usize),
    #[error("rank must be at least 1")]
    BadRank,
    #[error("catalog of {0} items is too small to rank")]
    CatalogTooSmall(usize),
    #[error("no user has a test item")]
    NoInstances,
    #[error("metrics file: {0}")]
    Format(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Tied competitors rank ahead of the ground truth.
    #[default]
    Pessimistic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedCandidates {
    pub ground_truth: String,
    /// Every candidate with its score, ground truth included.
    pub scored: Vec<(String, f64)>,
    pub tie_policy: TiePolicy,
}

impl RankedCandidates {
    pub fn new(ground_truth: impl Into<String>, scored: Vec<(String, f64)>) -> Self {
        Self {
            ground_truth: ground_truth.into(),
            scored,
            tie_policy: TiePolicy::Pessimistic,
        }
    }
}

/// 1-based rank of the ground truth in descending score order.
pub fn rank_of_ground_truth(c: &RankedCandidates) -> Result<usize, EvalError> {
    let mut gt = None;
    for (id, s) in &c.scored {
        if s.is_nan() {
            return Err(EvalError::NanScore(id.clone()));
        }
        if *id == c.ground_truth {
            if gt.is_some() {
                return Err(EvalError::DuplicateGroundTruth(id.clone()));
            }
            gt = Some(*s);
        }
    }
    let gt = gt.ok_or_else(|| EvalError::MissingGroundTruth(c.ground_truth.clone()))?;
    Ok(1 + c.scored.iter().filter(|(id, s)| *id != c.ground_truth && *s >= gt).count())
}

/// Rank of `gt` among `others` under the pessimistic tie policy.
pub fn rank_among(gt: f64, others: impl IntoIterator<Item = f64>) -> usize {
    1 + others.into_iter().filter(|&s| s >= gt).count()
}

fn check(rank: usize, k: usize) -> Result<(), EvalError> {
    if k < 1 {
        return Err(EvalError::BadK(k));
    }
    if rank < 1 {
        return Err(EvalError::BadRank);
    }
    Ok(())
}

pub fn recall_at_k(rank: usize, k: usize) -> Result<f64, EvalError> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64, EvalError> {
    check(rank, k)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Scorers

/// Anything that assigns a real score to a `(user, item)` pair; higher
/// means more likely to interact.
pub trait Scorer {
    fn score(&self, user: &str, item: &str) -> Result<f64, EvalError>;
}

/// Pair logit `(W_u z_u)·(W_i z_i)` over frozen feature tables, with both
/// transforms computed once per id. The sigmoid is monotone, so ranking by
/// the logit gives the same order without saturating into ties.
pub struct LinearScorer {
    users: HashMap<String, Vec<f64>>,
    items: HashMap<String, Vec<f64>>,
}

impl LinearScorer {
    pub fn new(users: &FeatureTable, items: &FeatureTable, w_user: &Tensor, w_item: &Tensor) -> Result<Self, EvalError> {
        let apply = |t: &FeatureTable, w: &Tensor| -> Result<HashMap<String, Vec<f64>>, EvalError> {
            t.rows
                .iter()
                .map(|(id, row)| Ok((id.clone(), transform(w, &row.vector)?)))
                .collect()
        };
        Ok(Self {
            users: apply(users, w_user)?,
            items: apply(items, w_item)?,
        })
    }

    /// Scores with rec head `head` of `model` on features of the task's
    /// items and of each user's training plus validation history.
    pub fn from_model(model: &Model, head: usize, task: &TaskData, checkpoint_hash: &str) -> Result<Self, EvalError> {
        let users = extract_features(model, checkpoint_hash, &user_inputs(task, HistoryScope::TrainVal)?, &task.name)?;
        let items = extract_features(model, checkpoint_hash, &item_inputs(task), &task.name)?;
        let (w_user, w_item) = model.rec_head(head)?;
        Self::new(&users, &items, w_user, w_item)
    }

    pub fn from_probe(probe: &ProbeParams, users: &FeatureTable, items: &FeatureTable) -> Result<Self, EvalError> {
        Self::new(users, items, &probe.w_user, &probe.w_item)
    }
}

impl Scorer for LinearScorer {
    fn score(&self, user: &str, item: &str) -> Result<f64, EvalError> {
        let u = self.users.get(user).ok_or_else(|| TransferError::MissingId(user.to_string()))?;
        let i = self.items.get(item).ok_or_else(|| TransferError::MissingId(item.to_string()))?;
        Ok(u.iter().zip(i).map(|(a, b)| a * b).sum())
    }
}

/// Uniform pseudo-random scores, a deterministic function of
/// `(seed, user, item)`.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, user: &str, item: &str) -> Result<f64, EvalError> {
        let h = derive_seed(self.seed, &[b"random-scorer", user.as_bytes(), item.as_bytes()]);
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Sampled { negatives: usize },
    FullRank,
}

impl Protocol {
    pub fn tag(&self) -> String {
        match self {
            Protocol::Sampled { negatives } => format!("sampled{negatives}"),
            Protocol::FullRank => "full".into(),
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        if tag == "full" {
            return Some(Protocol::FullRank);
        }
        tag.strip_prefix("sampled")?
            .parse()
            .ok()
            .map(|negatives| Protocol::Sampled { negatives })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub ks: Vec<usize>,
    /// `recall[j]` is the mean Recall@`ks[j]`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
}

pub const CSV_HEADER: &str = "protocol,k,metric,value,n,seed,checkpoint_hash";

impl MetricsReport {
    /// Averages per-instance ranks; the sum runs in the order given.
    pub fn from_ranks(protocol: Protocol, ks: &[usize], ranks: &[usize], seed: u64, checkpoint_hash: &str) -> Result<Self, EvalError> {
        if ranks.is_empty() {
            return Err(EvalError::NoInstances);
        }
        let mut recall = vec![0.0; ks.len()];
        let mut ndcg = vec![0.0; ks.len()];
        for &r in ranks {
            for (j, &k) in ks.iter().enumerate() {
                recall[j] += recall_at_k(r, k)?;
                ndcg[j] += ndcg_at_k(r, k)?;
            }
        }
        let n = ranks.len() as f64;
        Ok(Self {
            protocol,
            ks: ks.to_vec(),
            recall: recall.into_iter().map(|x| x / n).collect(),
            ndcg: ndcg.into_iter().map(|x| x / n).collect(),
            n: ranks.len(),
            seed,
            checkpoint_hash: checkpoint_hash.to_string(),
        })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.recall[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.ndcg[j])
    }

    /// Flat records, one per `(k, metric)`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        let tag = self.protocol.tag();
        for (j, k) in self.ks.iter().enumerate() {
            for (name, v) in [("recall", self.recall[j]), ("ndcg", self.ndcg[j])] {
                writeln!(s, "{tag},{k},{name},{v:?},{},{},{}", self.n, self.seed, self.checkpoint_hash).expect("string write");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let bad = |m: String| EvalError::Format(m);
        let mut lines = text.lines().filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut head: Option<(Protocol, usize, u64, String)> = None;
        let mut by_k: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
        let mut order = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields: {line}")));
            }
            let protocol = Protocol::from_tag(f[0]).ok_or_else(|| bad(format!("protocol {}", f[0])))?;
            let k: usize = f[1].parse().map_err(|_| bad(format!("k {}", f[1])))?;
            let v: f64 = f[3].parse().map_err(|_| bad(format!("value {}", f[3])))?;
            let n: usize = f[4].parse().map_err(|_| bad(format!("n {}", f[4])))?;
            let seed: u64 = f[5].parse().map_err(|_| bad(format!("seed {}", f[5])))?;
            let this = (protocol, n, seed, f[6].to_string());
            match &head {
                None => head = Some(this),
                Some(h) if *h != this => return Err(bad("mixed reports in one file".into())),
                _ => {}
            }
            if !by_k.contains_key(&k) {
                order.push(k);
            }
            let e = by_k.entry(k).or_default();
            match f[2] {
                "recall" => e.0 = Some(v),
                "ndcg" => e.1 = Some(v),
                m => return Err(bad(format!("metric {m}"))),
            }
        }
        let (protocol, n, seed, checkpoint_hash) = head.ok_or_else(|| bad("no records".into()))?;
        let mut recall = Vec::new();
        let mut ndcg = Vec::new();
        for k in &order {
            let (r, g) = by_k[k];
            recall.push(r.ok_or_else(|| bad(format!("no recall for k={k}")))?);
            ndcg.push(g.ok_or_else(|| bad(format!("no ndcg for k={k}")))?);
        }
        Ok(Self {
            protocol,
            ks: order,
            recall,
            ndcg,
            n,
            seed,
            checkpoint_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Sample mean and standard deviation (n−1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Protocols

fn check_ks(ks: &[usize]) -> Result<(), EvalError> {
    match ks.iter().find(|&&k| k < 1) {
        Some(&k) => Err(EvalError::BadK(k)),
        None if ks.is_empty() => Err(EvalError::BadK(0)),
        None => Ok(()),
    }
}

/// Per-user ranks of the test item against `negatives` sampled items the
/// user never interacted with (train, validation or test).
pub fn sampled_ranks(scorer: &dyn Scorer, task: &TaskData, negatives: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    let mut ranks = Vec::new();
    for (u, user) in task.users.iter().enumerate() {
        let Some(test) = user.test else { continue };
        let negs = sample_negatives(&user.user_id, negatives, task.n_items(), &user.positives(), seed, derive_seed(u as u64, &[b"eval"]))?;
        let gt = scorer.score(&user.user_id, &task.item_ids[test])?;
        let mut others = Vec::with_capacity(negs.len());
        for n in negs {
            others.push(scorer.score(&user.user_id, &task.item_ids[n])?);
        }
        ranks.push(checked_rank(&user.user_id, gt, others)?);
    }
    Ok(ranks)
}

fn checked_rank(user: &str, gt: f64, others: Vec<f64>) -> Result<usize, EvalError> {
    if gt.is_nan() || others.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore(user.to_string()));
    }
    Ok(rank_among(gt, others))
}

pub fn eval_sampled(
    scorer: &dyn Scorer,
    task: &TaskData,
    negatives: usize,
    ks: &[usize],
    seed: u64,
    checkpoint_hash: &str,
) -> Result<MetricsReport, EvalError> {
    check_ks(ks)?;
    let ranks = sampled_ranks(scorer, task, negatives, seed)?;
    MetricsReport::from_ranks(Protocol::Sampled { negatives }, ks, &ranks, seed, checkpoint_hash)
}

/// Per-user ranks of the test item against every catalog item outside the
/// user's training and validation items.
pub fn full_rank_ranks(scorer: &dyn Scorer, task: &TaskData) -> Result<Vec<usize>, EvalError> {
    if task.n_items() < 2 {
        return Err(EvalError::CatalogTooSmall(task.n_items()));
    }
    let mut ranks = Vec::new();
    for user in &task.users {
        let Some(test) = user.test else { continue };
        let seen: BTreeSet<usize> = user.train.iter().chain(&user.val).copied().collect();
        let gt = scorer.score(&user.user_id, &task.item_ids[test])?;
        let mut others = Vec::with_capacity(task.n_items());
        for i in (0..task.n_items()).filter(|i| *i != test && !seen.contains(i)) {
            others.push(scorer.score(&user.user_id, &task.item_ids[i])?);
        }
        ranks.push(checked_rank(&user.user_id, gt, others)?);
    }
    Ok(ranks)
}

pub fn eval_full_rank(scorer: &dyn Scorer, task: &TaskData, ks: &[usize], checkpoint_hash: &str) -> Result<MetricsReport, EvalError> {
    check_ks(ks)?;
    let ranks = full_rank_ranks(scorer, task)?;
    MetricsReport::from_ranks(Protocol::FullRank, ks, &ranks, 0, checkpoint_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::UserHistory;
    use crate::transfer::FeatureRow;
    use rand::Rng;

    fn cands(gt: &str, scores: &[(&str, f64)]) -> RankedCandidates {
        RankedCandidates::new(gt, scores.iter().map(|(i, s)| (i.to_string(), *s)).collect())
    }

    #[test]
    fn strictly_highest_is_rank_one() {
        let c = cands("a", &[("b", 0.1), ("a", 0.9), ("c", 0.5)]);
        assert_eq!(rank_of_ground_truth(&c).unwrap(), 1);
    }

    #[test]
    fn ties_rank_against_ground_truth() {
        let c = cands("a", &[("b", 1.0), ("a", 1.0), ("c", 1.0), ("d", 1.0), ("e", 0.0)]);
        assert_eq!(rank_of_ground_truth(&c).unwrap(), 4);
    }

    #[test]
    fn missing_or_duplicate_ground_truth_is_an_error() {
        assert!(matches!(
            rank_of_ground_truth(&cands("z", &[("a", 1.0)])),
            Err(EvalError::MissingGroundTruth(_))
        ));
        assert!(matches!(
            rank_of_ground_truth(&cands("a", &[("a", 1.0), ("a", 2.0)])),
            Err(EvalError::DuplicateGroundTruth(_))
        ));
        assert!(matches!(
            rank_of_ground_truth(&cands("a", &[("a", 1.0), ("b", f64::NAN)])),
            Err(EvalError::NanScore(_))
        ));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ndcg_at_k(1, 10).unwrap(), 1.0);
        assert!((ndcg_at_k(3, 10).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(recall_at_k(11, 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(11, 10).unwrap(), 0.0);
        assert_eq!(recall_at_k(10, 10).unwrap(), 1.0);
        assert!(matches!(recall_at_k(1, 0), Err(EvalError::BadK(0))));
        assert!(matches!(ndcg_at_k(0, 5), Err(EvalError::BadRank)));
    }

    /// Sorts a copy by descending score with the ground truth placed after
    /// every equal score, then reads off its position.
    fn sort_oracle(c: &RankedCandidates) -> usize {
        let mut v: Vec<(f64, bool)> = c.scored.iter().map(|(id, s)| (*s, *id == c.ground_truth)).collect();
        v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        v.iter().position(|x| x.1).unwrap() + 1
    }

    #[test]
    fn rank_matches_sort_oracle_with_ties() {
        let mut rng = crate::util::rng_for(3, &[b"rank-oracle"]);
        for case in 0..1000 {
            let n = rng.random_range(1..40);
            let levels = if case % 2 == 0 { 4 } else { 1000 };
            let scored: Vec<(String, f64)> = (0..n)
                .map(|i| (format!("i{i}"), rng.random_range(0..levels) as f64 / levels as f64))
                .collect();
            let gt = format!("i{}", rng.random_range(0..n));
            let c = RankedCandidates::new(gt, scored);
            assert_eq!(rank_of_ground_truth(&c).unwrap(), sort_oracle(&c), "case {case}");
        }
    }

    fn toy_task(n_users: usize, n_items: usize) -> TaskData {
        let users = (0..n_users)
            .map(|u| {
                let train: Vec<usize> = (0..3).map(|j| (u * 7 + j * 3) % n_items).collect();
                UserHistory {
                    user_id: format!("u{u}"),
                    train,
                    val: Some((u * 7 + 10) % n_items),
                    test: Some((u * 7 + 13) % n_items),
                }
            })
            .collect();
        TaskData {
            name: "toy".into(),
            item_ids: (0..n_items).map(|i| format!("it{i}")).collect(),
            item_tokens: vec![vec![1]; n_items],
            users,
            lm_corpus: Vec::new(),
            sep: 0,
            eoh: 1,
            max_history_tokens: 16,
        }
    }

    struct GtAtTop<'a>(&'a TaskData);

    impl Scorer for GtAtTop<'_> {
        fn score(&self, user: &str, item: &str) -> Result<f64, EvalError> {
            let u = self.0.users.iter().find(|x| x.user_id == user).unwrap();
            Ok(if self.0.item_ids[u.test.unwrap()] == item { f64::INFINITY } else { 0.0 })
        }
    }

    #[test]
    fn perfect_scorer_gets_full_marks() {
        let task = toy_task(20, 150);
        let r = eval_sampled(&GtAtTop(&task), &task, 100, &[10], 1, "h").unwrap();
        assert_eq!(r.recall_at(10), Some(1.0));
        assert_eq!(r.ndcg_at(10), Some(1.0));
        let r = eval_full_rank(&GtAtTop(&task), &task, &[1], "h").unwrap();
        assert_eq!(r.recall_at(1), Some(1.0));
    }

    #[test]
    fn sampled_is_deterministic_and_errors_on_small_pool() {
        let task = toy_task(30, 150);
        let s = RandomScorer { seed: 4 };
        let a = eval_sampled(&s, &task, 100, &[5, 10], 9, "h").unwrap();
        let b = eval_sampled(&s, &task, 100, &[5, 10], 9, "h").unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let small = toy_task(5, 50);
        assert!(matches!(
            eval_sampled(&s, &small, 100, &[10], 0, "h"),
            Err(EvalError::Train(TrainError::PoolExhausted { .. }))
        ));
    }

    #[test]
    fn random_scorer_matches_analytic_recall() {
        let task = toy_task(2500, 400);
        let r = eval_sampled(&RandomScorer { seed: 11 }, &task, 100, &[10], 5, "h").unwrap();
        let recall = r.recall_at(10).unwrap();
        assert!((recall - 10.0 / 101.0).abs() < 0.02, "recall {recall}");
    }

    /// Records every item the scorer is asked about, per user.
    struct Spy(std::cell::RefCell<Vec<(String, String)>>);

    impl Scorer for Spy {
        fn score(&self, user: &str, item: &str) -> Result<f64, EvalError> {
            self.0.borrow_mut().push((user.into(), item.into()));
            Ok(0.0)
        }
    }

    #[test]
    fn sampled_negatives_never_include_positives() {
        let task = toy_task(40, 110);
        let spy = Spy(Default::default());
        sampled_ranks(&spy, &task, 100, 2).unwrap();
        for user in &task.users {
            let asked: Vec<String> = spy.0.borrow().iter().filter(|(u, _)| *u == user.user_id).map(|(_, i)| i.clone()).collect();
            assert_eq!(asked.len(), 101);
            let test = &task.item_ids[user.test.unwrap()];
            for p in user.positives() {
                let id = &task.item_ids[p];
                let expect = usize::from(id == test);
                assert_eq!(asked.iter().filter(|a| *a == id).count(), expect);
            }
        }
    }

    #[test]
    fn constant_scores_give_pessimistic_full_rank() {
        let task = toy_task(10, 30);
        let ranks = full_rank_ranks(&RandomScorer { seed: 0 }, &task).unwrap();
        assert_eq!(ranks.len(), 10);
        struct Flat;
        impl Scorer for Flat {
            fn score(&self, _: &str, _: &str) -> Result<f64, EvalError> {
                Ok(0.5)
            }
        }
        for (user, r) in task.users.iter().zip(full_rank_ranks(&Flat, &task).unwrap()) {
            let seen: BTreeSet<usize> = user.train.iter().chain(&user.val).copied().collect();
            assert_eq!(r, 30 - seen.len());
        }
        let r = eval_full_rank(&Flat, &task, &[10], "h").unwrap();
        assert_eq!(r.recall_at(10), Some(0.0));
    }

    #[test]
    fn two_item_catalog() {
        let mut task = toy_task(1, 2);
        task.users[0] = UserHistory {
            user_id: "u0".into(),
            train: vec![],
            val: None,
            test: Some(1),
        };
        struct Pref;
        impl Scorer for Pref {
            fn score(&self, _: &str, item: &str) -> Result<f64, EvalError> {
                Ok(if item == "it1" { 1.0 } else { 0.0 })
            }
        }
        assert_eq!(eval_full_rank(&Pref, &task, &[1], "h").unwrap().recall_at(1), Some(1.0));
        let tiny = toy_task(1, 1);
        assert!(matches!(eval_full_rank(&Pref, &tiny, &[1], "h"), Err(EvalError::CatalogTooSmall(1))));
    }

    fn table(ids: &[String], d: usize, seed: u64) -> FeatureTable {
        let mut rng = crate::util::rng_for(seed, &[b"table"]);
        let mut t = FeatureTable::new(d, "test", "ck");
        for id in ids {
            let vector = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.insert(id.clone(), FeatureRow { cold: false, vector }).unwrap();
        }
        t
    }

    #[test]
    fn full_rank_matches_loop_oracle() {
        let task = toy_task(50, 60);
        let d = 3;
        let user_ids: Vec<String> = task.users.iter().map(|u| u.user_id.clone()).collect();
        let users = table(&user_ids, d, 1);
        let items = table(&task.item_ids, d, 2);
        let probe = ProbeParams {
            w_user: Tensor::matrix(d, d, vec![1.0, 0.2, 0.0, 0.0, 1.0, -0.3, 0.5, 0.0, 1.0]).unwrap(),
            w_item: Tensor::matrix(d, d, vec![0.7, 0.0, 0.1, 0.0, 1.0, 0.0, -0.2, 0.4, 1.0]).unwrap(),
        };
        let scorer = LinearScorer::from_probe(&probe, &users, &items).unwrap();
        let got = eval_full_rank(&scorer, &task, &[1, 5, 10], "ck").unwrap();

        // Straight-line recomputation of every score from the raw matrices.
        let logit = |u: &str, i: &str| {
            let (zu, zi) = (users.get(u).unwrap(), items.get(i).unwrap());
            let mut s = 0.0;
            for r in 0..d {
                let a: f64 = (0..d).map(|c| probe.w_user.data()[r * d + c] * zu[c]).sum();
                let b: f64 = (0..d).map(|c| probe.w_item.data()[r * d + c] * zi[c]).sum();
                s += a * b;
            }
            s
        };
        let ks = [1usize, 5, 10];
        let mut recall = [0.0; 3];
        let mut ndcg = [0.0; 3];
        for user in &task.users {
            let gt_item = &task.item_ids[user.test.unwrap()];
            let gt = logit(&user.user_id, gt_item);
            let mut rank = 1;
            for (i, id) in task.item_ids.iter().enumerate() {
                if user.train.contains(&i) || user.val == Some(i) || id == gt_item {
                    continue;
                }
                if logit(&user.user_id, id) >= gt {
                    rank += 1;
                }
            }
            for (j, &k) in ks.iter().enumerate() {
                if rank <= k {
                    recall[j] += 1.0;
                    ndcg[j] += 1.0 / ((rank + 1) as f64).log2();
                }
            }
        }
        for j in 0..3 {
            assert!((got.recall[j] - recall[j] / 50.0).abs() < 1e-12);
            assert!((got.ndcg[j] - ndcg[j] / 50.0).abs() < 1e-12);
        }
        assert_eq!(got.n, 50);
    }

    #[test]
    fn csv_round_trip() {
        let r = MetricsReport::from_ranks(Protocol::Sampled { negatives: 100 }, &[5, 10], &[1, 3, 7, 40], 7, "abc").unwrap();
        let text = r.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(MetricsReport::from_csv(&text).unwrap(), r);
        assert!(MetricsReport::from_csv("nonsense").is_err());
    }

    #[test]
    fn mean_std_basic() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
    }
}
