//! Behavior logs: items, interactions, history-to-text serialization,
//! splitting, filtering and a seeded synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbpe::{BbpeError, TokenId, Vocab};
use crate::util::rng_for;

pub const DEFAULT_MAX_ITEM_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty history")]
    EmptyHistory,
    #[error("token budget {0} cannot hold the end-of-history marker plus one token")]
    BudgetTooSmall(usize),
    #[error("item {0:?} has empty text")]
    EmptyText(String),
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("interaction of user {user:?} references unknown item {item:?}")]
    UnknownItem { user: String, item: String },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("need at least {need} users, got {got}")]
    TooFewUsers { need: usize, got: usize },
    #[error("user {user:?} has {count} interactions; leave-one-out needs at least 3")]
    ShortHistory { user: String, count: usize },
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Tokenizer(#[from] BbpeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub text: String,
    #[serde(rename = "service")]
    pub service_tag: String,
}

/// A stored (positive) interaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Tied to a downstream recommendation task; feeds both losses.
    Specific,
    /// Auxiliary behavior text; feeds the language-model loss only.
    Agnostic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDataset {
    name: String,
    kind: DatasetKind,
    items: Vec<ItemRecord>,
    interactions: Vec<Interaction>,
    index: HashMap<String, usize>,
}

impl BehaviorDataset {
    pub fn new(
        name: impl Into<String>,
        kind: DatasetKind,
        items: Vec<ItemRecord>,
        interactions: Vec<Interaction>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.text.is_empty() {
                return Err(CorpusError::EmptyText(item.item_id.clone()));
            }
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateItem(item.item_id.clone()));
            }
        }
        for it in &interactions {
            if !index.contains_key(&it.item_id) {
                return Err(CorpusError::UnknownItem {
                    user: it.user_id.clone(),
                    item: it.item_id.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            kind,
            items,
            interactions,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemRecord> {
        self.index.get(item_id).map(|&i| &self.items[i])
    }

    /// Distinct users in sorted order.
    pub fn users(&self) -> Vec<String> {
        self.interactions
            .iter()
            .map(|i| i.user_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Per-user interactions ordered by `(timestamp, item_id)`.
    pub fn histories(&self) -> BTreeMap<String, Vec<&Interaction>> {
        let mut out: BTreeMap<String, Vec<&Interaction>> = BTreeMap::new();
        for it in &self.interactions {
            out.entry(it.user_id.clone()).or_default().push(it);
        }
        for seq in out.values_mut() {
            seq.sort_by(|a, b| (a.timestamp, &a.item_id).cmp(&(b.timestamp, &b.item_id)));
        }
        out
    }

    /// Per-user item ids in chronological order.
    pub fn item_sequences(&self) -> BTreeMap<String, Vec<String>> {
        self.histories()
            .into_iter()
            .map(|(u, seq)| (u, seq.into_iter().map(|i| i.item_id.clone()).collect()))
            .collect()
    }

    /// Item records for a list of ids; panics on unknown ids, which the
    /// constructor rules out for ids taken from this dataset.
    pub fn records<'a>(&'a self, ids: &[String]) -> Vec<&'a ItemRecord> {
        ids.iter().map(|id| self.item(id).expect("item id from this dataset")).collect()
    }
}

/// Serializes a chronological history as
/// `item₁ [SEP] item₂ [SEP] … itemₙ [EOH]` within `max_len` tokens.
///
/// Over-budget histories lose whole items from the oldest end. When the most
/// recent item alone is too long its head is kept.
pub fn build_history_text(history: &[&ItemRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<TokenId>, CorpusError> {
    let encoded: Vec<Vec<TokenId>> = history.iter().map(|it| vocab.encode(&it.text)).collect();
    let refs: Vec<&[TokenId]> = encoded.iter().map(|e| e.as_slice()).collect();
    join_history(&refs, vocab.sep()?, vocab.eoh()?, max_len)
}

/// [`build_history_text`] over already-encoded items.
pub fn join_history(encoded: &[&[TokenId]], sep: TokenId, eoh: TokenId, max_len: usize) -> Result<Vec<TokenId>, CorpusError> {
    if encoded.is_empty() {
        return Err(CorpusError::EmptyHistory);
    }
    if max_len < 2 {
        return Err(CorpusError::BudgetTooSmall(max_len));
    }
    // Walk back from the most recent item while the suffix fits.
    let mut start = encoded.len();
    let mut used = 1; // [EOH]
    while start > 0 {
        let cost = encoded[start - 1].len() + usize::from(start < encoded.len());
        if used + cost > max_len {
            break;
        }
        used += cost;
        start -= 1;
    }
    let mut out = Vec::with_capacity(used.min(max_len));
    if start == encoded.len() {
        let last = encoded[encoded.len() - 1];
        out.extend_from_slice(&last[..last.len().min(max_len - 1)]);
    } else {
        for (i, e) in encoded[start..].iter().enumerate() {
            if i > 0 {
                out.push(sep);
            }
            out.extend_from_slice(e);
        }
    }
    out.push(eoh);
    Ok(out)
}

/// `encode(text)` truncated to `max_item_tokens − 1`, then `[EOH]`.
pub fn build_item_text(item: &ItemRecord, vocab: &Vocab, max_item_tokens: usize) -> Result<Vec<TokenId>, CorpusError> {
    if item.text.is_empty() {
        return Err(CorpusError::EmptyText(item.item_id.clone()));
    }
    if max_item_tokens < 2 {
        return Err(CorpusError::BudgetTooSmall(max_item_tokens));
    }
    let mut ids = vocab.encode(&item.text);
    ids.truncate(max_item_tokens - 1);
    ids.push(vocab.eoh()?);
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Assignment of whole users to train/validation/test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub assignment: BTreeMap<String, Part>,
}

impl UserSplit {
    pub fn users_in(&self, part: Part) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == part)
            .map(|(u, _)| u.clone())
            .collect()
    }
}

/// Random user-pool split. Validation and test sizes are `floor(ratio·n)`;
/// the remainder goes to train.
pub fn split_users(user_ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<UserSplit, CorpusError> {
    let (tr, va, te) = ratios;
    if tr < 0.0 || va < 0.0 || te < 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut users: Vec<String> = user_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if users.len() < 3 {
        return Err(CorpusError::TooFewUsers {
            need: 3,
            got: users.len(),
        });
    }
    let n = users.len();
    let n_val = (va * n as f64 + 1e-9).floor() as usize;
    let n_test = (te * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    users.shuffle(&mut rng_for(seed, &[b"split_users"]));
    let assignment = users
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            let part = if i < n_train {
                Part::Train
            } else if i < n_train + n_val {
                Part::Val
            } else {
                Part::Test
            };
            (u, part)
        })
        .collect();
    Ok(UserSplit { assignment })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub train: Vec<String>,
    pub val: String,
    pub test: String,
}

/// Per-user chronological split: last item → test, second-last → validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    pub users: BTreeMap<String, UserSequence>,
}

pub fn leave_one_out(dataset: &BehaviorDataset) -> Result<LeaveOneOut, CorpusError> {
    let mut users = BTreeMap::new();
    for (user, mut seq) in dataset.item_sequences() {
        if seq.len() < 3 {
            return Err(CorpusError::ShortHistory {
                user,
                count: seq.len(),
            });
        }
        let test = seq.pop().unwrap();
        let val = seq.pop().unwrap();
        users.insert(user, UserSequence { train: seq, val, test });
    }
    Ok(LeaveOneOut { users })
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every remaining user and item has at least `k` (the bipartite k-core).
pub fn filter_min_interactions(dataset: &BehaviorDataset, k: usize) -> BehaviorDataset {
    let mut interactions = dataset.interactions.clone();
    loop {
        let mut per_user: HashMap<&str, usize> = HashMap::new();
        let mut per_item: HashMap<&str, usize> = HashMap::new();
        for it in &interactions {
            *per_user.entry(&it.user_id).or_default() += 1;
            *per_item.entry(&it.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = interactions
            .iter()
            .map(|it| per_user[it.user_id.as_str()] >= k && per_item[it.item_id.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        let mut flags = keep.into_iter();
        interactions.retain(|_| flags.next().unwrap());
    }
    let live: BTreeSet<&str> = interactions.iter().map(|i| i.item_id.as_str()).collect();
    let items = dataset
        .items
        .iter()
        .filter(|it| k == 0 || live.contains(it.item_id.as_str()))
        .cloned()
        .collect();
    BehaviorDataset::new(dataset.name.clone(), dataset.kind, items, interactions).expect("subset of a valid dataset")
}

/// Concatenates per-service histories in the given service order, for
/// extracting a single feature from all of a user's behavior.
pub fn combine_histories<'a>(per_service: &[Vec<&'a ItemRecord>]) -> Vec<&'a ItemRecord> {
    per_service.iter().flat_map(|h| h.iter().copied()).collect()
}

// ---------------------------------------------------------------------------
// Files

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DatasetKind,
    pub items: PathBuf,
    pub interactions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset through its manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<BehaviorDataset, CorpusError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: manifest_path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let items = read_jsonl(&base.join(&manifest.items))?;
    let interactions = read_jsonl(&base.join(&manifest.interactions))?;
    BehaviorDataset::new(manifest.name, manifest.kind, items, interactions)
}

/// Writes `<name>.items.jsonl`, `<name>.interactions.jsonl` and
/// `<name>.manifest.json` into `dir`; returns the manifest path.
pub fn save_dataset(dataset: &BehaviorDataset, dir: &Path, config_hash: Option<&str>) -> Result<PathBuf, CorpusError> {
    std::fs::create_dir_all(dir)?;
    let items = PathBuf::from(format!("{}.items.jsonl", dataset.name));
    let interactions = PathBuf::from(format!("{}.interactions.jsonl", dataset.name));
    write_jsonl(&dir.join(&items), &dataset.items)?;
    write_jsonl(&dir.join(&interactions), &dataset.interactions)?;
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        kind: dataset.kind,
        items,
        interactions,
        config_hash: config_hash.map(str::to_string),
    };
    let path = dir.join(format!("{}.manifest.json", dataset.name));
    let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    /// Inclusive range of interactions per user.
    pub history_len_range: (usize, usize),
    pub vocab_words_per_topic: usize,
    #[serde(default = "default_words_per_item")]
    pub words_per_item: usize,
    pub seed: u64,
    #[serde(default = "default_service")]
    pub service: String,
}

fn default_words_per_item() -> usize {
    3
}

fn default_service() -> String {
    "synth".to_string()
}

/// One behavior log of a multi-service synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub kind: DatasetKind,
    pub n_items: usize,
    pub history_len_range: (usize, usize),
}

/// Weight of a user's primary topic; one secondary topic gets
/// `SECONDARY_WEIGHT`, every other topic weight 1.
const PRIMARY_WEIGHT: u32 = 13;
const SECONDARY_WEIGHT: u32 = 4;

/// Latent structure shared by every service of a synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub topic_words: Vec<Vec<String>>,
    /// Integer topic weights per user, users ordered by id.
    pub preferences: Vec<(String, Vec<u32>)>,
}

impl SyntheticWorld {
    pub fn primary_topic(&self, user_index: usize) -> usize {
        argmax(&self.preferences[user_index].1)
    }
}

fn argmax(w: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = i;
        }
    }
    best
}

fn weighted_index<R: Rng>(rng: &mut R, weights: &[u32]) -> usize {
    let total: u32 = weights.iter().sum();
    let mut r = rng.random_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    unreachable!("r < total")
}

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], VOWELS[rng.random_range(0..VOWELS.len())]))
        .collect()
}

fn validate_gen(config: &GenConfig) -> Result<(), CorpusError> {
    let bad = |m: &str| Err(CorpusError::BadConfig(m.to_string()));
    if config.n_users == 0 || config.n_items == 0 {
        return bad("n_users and n_items must be positive");
    }
    if config.n_topics == 0 || config.n_topics > config.n_items {
        return bad("need 1 <= n_topics <= n_items");
    }
    if config.vocab_words_per_topic == 0 || config.words_per_item == 0 {
        return bad("word counts must be positive");
    }
    let (lo, hi) = config.history_len_range;
    if lo == 0 || lo > hi {
        return bad("history_len_range must be a non-empty range of positive lengths");
    }
    Ok(())
}

/// Topic word lists and per-user topic preferences for `config`.
pub fn synthetic_world(config: &GenConfig) -> Result<SyntheticWorld, CorpusError> {
    validate_gen(config)?;
    let mut rng = rng_for(config.seed, &[b"world"]);
    let mut seen = BTreeSet::new();
    let mut topic_words = Vec::with_capacity(config.n_topics);
    for _ in 0..config.n_topics {
        let mut words = Vec::with_capacity(config.vocab_words_per_topic);
        while words.len() < config.vocab_words_per_topic {
            let w = pseudo_word(&mut rng);
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        topic_words.push(words);
    }
    let width = config.n_users.to_string().len().max(4);
    let preferences = (0..config.n_users)
        .map(|u| {
            let mut w = vec![1u32; config.n_topics];
            let primary = rng.random_range(0..config.n_topics);
            w[primary] = PRIMARY_WEIGHT;
            if config.n_topics > 1 {
                let mut secondary = rng.random_range(0..config.n_topics - 1);
                if secondary >= primary {
                    secondary += 1;
                }
                w[secondary] = SECONDARY_WEIGHT;
            }
            (format!("u{u:0width$}"), w)
        })
        .collect();
    Ok(SyntheticWorld {
        topic_words,
        preferences,
    })
}

/// Generates one service of `world`. Items are assigned topics round-robin
/// and described by words of their topic; each user draws items by first
/// drawing a topic from their preferences, then an item of that topic by
/// popularity, without repeating items. Timestamps follow draw order.
pub fn generate_service(
    world: &SyntheticWorld,
    config: &GenConfig,
    spec: &ServiceSpec,
) -> Result<BehaviorDataset, CorpusError> {
    let n_topics = world.topic_words.len();
    if spec.n_items < n_topics {
        return Err(CorpusError::BadConfig(format!("service {} has fewer items than topics", spec.name)));
    }
    let (lo, hi) = spec.history_len_range;
    if lo == 0 || lo > hi || hi > spec.n_items {
        return Err(CorpusError::BadConfig(format!("bad history_len_range for service {}", spec.name)));
    }
    let mut rng = rng_for(config.seed, &[b"service", spec.name.as_bytes()]);
    let width = spec.n_items.to_string().len().max(4);
    let mut items = Vec::with_capacity(spec.n_items);
    let mut by_topic: Vec<Vec<(usize, u32)>> = vec![Vec::new(); n_topics];
    for i in 0..spec.n_items {
        let topic = i % n_topics;
        let words = &world.topic_words[topic];
        let text = (0..config.words_per_item)
            .map(|_| words[rng.random_range(0..words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        by_topic[topic].push((i, rng.random_range(1..=8)));
        items.push(ItemRecord {
            item_id: format!("{}-i{i:0width$}", spec.name),
            text,
            service_tag: spec.name.clone(),
        });
    }
    let mut interactions = Vec::new();
    let mut clock: i64 = 0;
    for (user, prefs) in &world.preferences {
        let len = rng.random_range(lo..=hi);
        let mut taken = vec![false; spec.n_items];
        let mut remaining: Vec<u32> = by_topic.iter().map(|t| t.len() as u32).collect();
        for _ in 0..len {
            let weights: Vec<u32> = prefs
                .iter()
                .zip(&remaining)
                .map(|(&w, &r)| if r > 0 { w } else { 0 })
                .collect();
            let topic = weighted_index(&mut rng, &weights);
            let pool: Vec<(usize, u32)> = by_topic[topic].iter().copied().filter(|&(i, _)| !taken[i]).collect();
            let pick = pool[weighted_index(&mut rng, &pool.iter().map(|p| p.1).collect::<Vec<_>>())].0;
            taken[pick] = true;
            remaining[topic] -= 1;
            clock += 1;
            interactions.push(Interaction {
                user_id: user.clone(),
                item_id: items[pick].item_id.clone(),
                timestamp: clock,
            });
        }
    }
    BehaviorDataset::new(spec.name.clone(), spec.kind, items, interactions)
}

/// Single-service synthetic dataset named after `config.service`.
pub fn generate_synthetic(config: &GenConfig) -> Result<BehaviorDataset, CorpusError> {
    let world = synthetic_world(config)?;
    let spec = ServiceSpec {
        name: config.service.clone(),
        kind: DatasetKind::Specific,
        n_items: config.n_items,
        history_len_range: config.history_len_range,
    };
    generate_service(&world, config, &spec)
}
