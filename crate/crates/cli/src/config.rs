//! The run configuration: one TOML file covering every pipeline stage.
//!
//! Every section has defaults, so an empty file is a valid (if tiny) run.
//! The resolved form, with all defaults written out, is saved beside the
//! outputs and its hash is stamped into every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use textrec::corpus::{DatasetKind, GenConfig, ServiceSpec};
use textrec::curvature::CurvaturePlan;
use textrec::training::TrainPlan;
use textrec::transfer::{CombineMode, ProbePlan};

use crate::error::CliError;

pub const RESOLVED_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds generation, initialization, batching, sampling and probes.
    pub seed: u64,
    /// Where every artifact of the run is written. `TEXTREC_OUTPUT_DIR`
    /// overrides it.
    pub output_dir: PathBuf,
    pub synth: SynthSection,
    pub data: DataSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainPlan,
    pub transfer: TransferSection,
    pub eval: EvalSection,
    pub curvature: CurvaturePlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            synth: SynthSection::default(),
            data: DataSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            train: TrainPlan {
                total_steps: 200,
                eval_interval: 25,
                patience: 8,
                peak_lr: 1e-2,
                warmup_fraction: 0.05,
                ..TrainPlan::default()
            },
            transfer: TransferSection::default(),
            eval: EvalSection::default(),
            curvature: CurvaturePlan::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_users: usize,
    pub n_topics: usize,
    pub vocab_words_per_topic: usize,
    pub words_per_item: usize,
    /// One behavior log per entry, all drawn from the same users.
    pub services: Vec<ServiceSpec>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_topics: 4,
            vocab_words_per_topic: 6,
            words_per_item: 3,
            services: vec![ServiceSpec {
                name: "synth".into(),
                kind: DatasetKind::Specific,
                n_items: 100,
                history_len_range: (5, 12),
            }],
        }
    }
}

impl SynthSection {
    pub fn gen_config(&self, seed: u64) -> GenConfig {
        let first = self.services.first();
        GenConfig {
            n_users: self.n_users,
            n_items: first.map_or(1, |s| s.n_items),
            n_topics: self.n_topics,
            history_len_range: first.map_or((1, 1), |s| s.history_len_range),
            vocab_words_per_topic: self.vocab_words_per_topic,
            words_per_item: self.words_per_item,
            seed,
            service: first.map_or_else(|| "synth".into(), |s| s.name.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Extra dataset manifests, relative to the config file. Datasets
    /// written by `synth-gen` into the run directory are always included.
    pub datasets: Vec<PathBuf>,
    /// The downstream task trained, probed and evaluated.
    pub target: String,
    /// Task-specific datasets for multi-task pretraining; never the target.
    pub pretrain: Vec<String>,
    /// Datasets used only as language-model text and for feature pooling.
    pub agnostic: Vec<String>,
    /// Users with fewer interactions are dropped (k-core filter).
    pub min_interactions: usize,
    pub max_history_tokens: usize,
    pub max_item_tokens: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            target: "synth".into(),
            pretrain: Vec::new(),
            agnostic: Vec::new(),
            min_interactions: 3,
            max_history_tokens: 64,
            max_item_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: 320 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// 0 means `data.max_history_tokens`.
    pub max_seq_len: usize,
    pub tied_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_emb: 16,
            n_heads: 2,
            d_ffn: 64,
            max_seq_len: 0,
            tied_head: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// The checkpoint written by `train`.
    Trained,
    /// The checkpoint written by `pretrain-multitask`.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub backbone: Backbone,
    pub combine: CombineMode,
    pub probe: ProbePlan,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            backbone: Backbone::Trained,
            combine: CombineMode::MeanPool,
            probe: ProbePlan {
                steps: 300,
                ..ProbePlan::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    Sampled,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerChoice {
    /// The trained model's own rec head.
    Model,
    /// A linear probe on frozen features.
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: ProtocolChoice,
    pub negatives: usize,
    pub ks: Vec<usize>,
    pub scorer: ScorerChoice,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: ProtocolChoice::Sampled,
            negatives: 100,
            ks: vec![10],
            scorer: ScorerChoice::Probe,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    /// Parses `text`; relative dataset paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for p in &mut config.data.datasets {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Copies the global seed into every stage and checks every field.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        for (name, seed) in [
            ("train.seed", self.train.seed),
            ("transfer.probe.seed", self.transfer.probe.seed),
            ("curvature.seed", self.curvature.seed),
        ] {
            if seed != 0 && seed != self.seed {
                return Err(field(name, "stage seeds follow the global `seed`; leave it unset"));
            }
        }
        self.train.seed = self.seed;
        self.transfer.probe.seed = self.seed;
        self.curvature.seed = self.seed;
        if self.model.max_seq_len == 0 {
            self.model.max_seq_len = self.data.max_history_tokens;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| field("train", e))?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(field("output_dir", "must not be empty"));
        }
        let s = &self.synth;
        if s.n_users == 0 || s.n_topics == 0 || s.vocab_words_per_topic == 0 || s.words_per_item == 0 {
            return Err(field("synth", "n_users, n_topics, vocab_words_per_topic and words_per_item must be positive"));
        }
        for (i, svc) in s.services.iter().enumerate() {
            let (lo, hi) = svc.history_len_range;
            if svc.name.is_empty() || svc.name.contains(['/', '\\', '\t', '\n']) {
                return Err(field(&format!("synth.services[{i}].name"), "must be a plain non-empty name"));
            }
            if svc.n_items < s.n_topics {
                return Err(field(&format!("synth.services[{i}].n_items"), "must be at least n_topics"));
            }
            if lo == 0 || lo > hi || hi > svc.n_items {
                return Err(field(&format!("synth.services[{i}].history_len_range"), "need 1 <= lo <= hi <= n_items"));
            }
        }
        let d = &self.data;
        if d.target.is_empty() {
            return Err(field("data.target", "must name a dataset"));
        }
        if d.pretrain.contains(&d.target) {
            return Err(field("data.pretrain", "must not contain the target task"));
        }
        if d.agnostic.contains(&d.target) {
            return Err(field("data.agnostic", "must not contain the target task"));
        }
        if d.max_history_tokens < 2 {
            return Err(field("data.max_history_tokens", "must be at least 2"));
        }
        if d.max_item_tokens == 0 {
            return Err(field("data.max_item_tokens", "must be positive"));
        }
        if self.tokenizer.vocab_size < 259 {
            return Err(field("tokenizer.vocab_size", "must cover the 256 bytes and 3 special tokens"));
        }
        let m = &self.model;
        if m.n_layers == 0 || m.d_emb == 0 || m.n_heads == 0 || m.d_ffn == 0 {
            return Err(field("model", "n_layers, d_emb, n_heads and d_ffn must be positive"));
        }
        if m.d_emb % m.n_heads != 0 {
            return Err(field("model.n_heads", "must divide d_emb"));
        }
        if m.max_seq_len < d.max_history_tokens.max(d.max_item_tokens + 1) {
            return Err(field("model.max_seq_len", "must fit the longest history and item text"));
        }
        let p = &self.transfer.probe;
        if p.steps == 0 || p.batch_size == 0 || p.negatives_per_positive == 0 {
            return Err(field("transfer.probe", "steps, batch_size and negatives_per_positive must be positive"));
        }
        if !(p.peak_lr > 0.0) || !(p.clip_norm > 0.0) || !(p.warmup_fraction > 0.0 && p.warmup_fraction < 1.0) {
            return Err(field("transfer.probe", "peak_lr and clip_norm must be positive, warmup_fraction in (0, 1)"));
        }
        let e = &self.eval;
        if e.ks.is_empty() || e.ks.contains(&0) {
            return Err(field("eval.ks", "must be a non-empty list of positive cutoffs"));
        }
        if e.protocol == ProtocolChoice::Sampled && e.negatives == 0 {
            return Err(field("eval.negatives", "must be positive"));
        }
        let c = &self.curvature;
        if c.k == 0 || c.max_iters == 0 || !(c.tol > 0.0) || c.batch_users == 0 || c.negatives_per_positive == 0 {
            return Err(field("curvature", "k, max_iters, tol, batch_users and negatives_per_positive must be positive"));
        }
        if c.head != 0 {
            return Err(field("curvature.head", "the trained model has a single rec head"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the resolved config without its output location, so a run
    /// replayed into another directory stamps identical outputs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let c = RunConfig::parse("", Path::new(".")).unwrap().resolve().unwrap();
        assert_eq!(c.model.max_seq_len, c.data.max_history_tokens);
        let again = RunConfig::parse(&c.to_toml(), Path::new(".")).unwrap().resolve().unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("[model]\nd_emb = 15\nn_heads = 2\n", Path::new("."))
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(err.to_string().contains("model.n_heads"), "{err}");
        let err = RunConfig::parse("[train]\nseed = 4\n", Path::new(".")).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("train.seed"), "{err}");
        let err = RunConfig::parse("[eval]\nks = [0]\n", Path::new(".")).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("eval.ks"), "{err}");
        let err = RunConfig::parse("bogus = 1\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default().resolve().unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.clone().resolve().unwrap().hash());
    }
}
