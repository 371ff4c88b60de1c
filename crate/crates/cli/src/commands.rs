//! One function per subcommand. Each reads its inputs from the run
//! directory, checks they exist before any compute, and writes its outputs
//! stamped with the resolved-config hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use textrec::bbpe::{train_bbpe, TokenId, Vocab, DEFAULT_SPECIALS};
use textrec::corpus::{
    filter_min_interactions, generate_service, join_history, leave_one_out, load_dataset, save_dataset, synthetic_world,
    BehaviorDataset,
};
use textrec::curvature::model_eigs;
use textrec::eval::{eval_full_rank, eval_sampled, LinearScorer, MetricsReport, Scorer};
use textrec::model::{Checkpoint, Model, ModelConfig};
use textrec::training::{train, LogRecord, TaskData, TrainOutcome};
use textrec::transfer::{
    combine_features, extract_features, item_inputs, pretrain_multitask, probe_from_text, probe_pairs, probe_to_text,
    train_linear_probe, user_inputs, CombineMode, FeatureTable, HistoryScope,
};

use crate::config::{Backbone, ProtocolChoice, RunConfig, ScorerChoice, RESOLVED_NAME};
use crate::error::CliError;

/// A resolved config bound to its output directory.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
}

pub const VOCAB: &str = "vocab.txt";
pub const TRAINED: &str = "checkpoints/trained.ckpt";
pub const PRETRAINED: &str = "checkpoints/pretrained.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const USERS_TRAIN: &str = "features/users.train.tsv";
pub const USERS_EVAL: &str = "features/users.eval.tsv";
pub const ITEMS: &str = "features/items.tsv";
pub const PROBE: &str = "probe.txt";
pub const METRICS: &str = "metrics.csv";
pub const EIGS: &str = "eigs.csv";

impl Run {
    pub fn new(config: RunConfig) -> Result<Self, CliError> {
        let dir = config.output_dir.clone();
        let hash = config.hash();
        std::fs::create_dir_all(&dir)?;
        let resolved = format!("# config_hash {hash}\n{}", config.to_toml());
        std::fs::write(dir.join(RESOLVED_NAME), resolved)?;
        Ok(Self { config, dir, hash })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, what: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(CliError::missing(what, &p));
        }
        Ok(p)
    }

    /// Writes `text` followed by a trailing `# config_hash` annotation.
    pub fn write_stamped(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        self.write_raw(rel, &format!("{text}# config_hash {}\n", self.hash))
    }

    pub fn write_raw(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, text)?;
        Ok(p)
    }

    fn task_path(&self, name: &str) -> PathBuf {
        self.path(&format!("corpus/{name}.task.json"))
    }

    fn vocab(&self) -> Result<Vocab, CliError> {
        Ok(Vocab::load(&self.require(VOCAB, "vocabulary (run tokenizer-train)")?)?)
    }

    fn checkpoint(&self, rel: &str) -> Result<Checkpoint, CliError> {
        Ok(Checkpoint::load(&self.require(rel, "checkpoint")?)?)
    }

    /// Every dataset: those written by `synth-gen` plus configured manifests.
    fn datasets(&self) -> Result<BTreeMap<String, BehaviorDataset>, CliError> {
        let mut manifests: Vec<PathBuf> = Vec::new();
        let data_dir = self.path("data");
        if data_dir.is_dir() {
            for entry in std::fs::read_dir(&data_dir)? {
                let p = entry?.path();
                if p.to_string_lossy().ends_with(".manifest.json") {
                    manifests.push(p);
                }
            }
        }
        manifests.sort();
        for p in &self.config.data.datasets {
            if !p.exists() {
                return Err(CliError::missing("dataset manifest", p));
            }
            manifests.push(p.clone());
        }
        let mut out = BTreeMap::new();
        for p in manifests {
            let ds = load_dataset(&p)?;
            let name = ds.name().to_string();
            if out.insert(name.clone(), ds).is_some() {
                return Err(CliError::Data(format!("dataset {name:?} defined twice")));
            }
        }
        if out.is_empty() {
            return Err(CliError::Data("no datasets (run synth-gen or list data.datasets)".into()));
        }
        Ok(out)
    }

    fn task(&self, name: &str) -> Result<TaskData, CliError> {
        let p = self.task_path(name);
        if !p.exists() {
            return Err(CliError::missing(&format!("corpus for {name:?} (run corpus-build)"), &p));
        }
        let file: TaskFile = serde_json::from_str(&std::fs::read_to_string(&p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(file.task)
    }

    fn tasks(&self, names: &[String]) -> Result<Vec<TaskData>, CliError> {
        names.iter().map(|n| self.task(n)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    config_hash: String,
    vocab_hash: String,
    task: TaskData,
}

pub fn synth_gen(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let gen = c.synth.gen_config(c.seed);
    let world = synthetic_world(&gen)?;
    for spec in &c.synth.services {
        let ds = generate_service(&world, &gen, spec)?;
        let path = save_dataset(&ds, &run.path("data"), Some(&run.hash))?;
        log::info!("wrote {} ({} interactions)", path.display(), ds.interactions().len());
    }
    Ok(())
}

pub fn tokenizer_train(run: &Run) -> Result<(), CliError> {
    let datasets = run.datasets()?;
    let texts: Vec<&str> = datasets.values().flat_map(|d| d.items().iter().map(|i| i.text.as_str())).collect();
    let vocab = train_bbpe(texts.iter().copied(), run.config.tokenizer.vocab_size, &DEFAULT_SPECIALS)?;
    run.write_stamped(VOCAB, &vocab.to_text())?;
    log::info!("vocabulary of {} tokens", vocab.len());
    Ok(())
}

pub fn corpus_build(run: &Run) -> Result<(), CliError> {
    let vocab = run.vocab()?;
    let d = &run.config.data;
    let datasets = run.datasets()?;
    for name in std::iter::once(&d.target).chain(&d.pretrain).chain(&d.agnostic) {
        if !datasets.contains_key(name) {
            return Err(CliError::Config(format!("data: dataset {name:?} does not exist")));
        }
    }
    for (name, ds) in &datasets {
        let ds = filter_min_interactions(ds, d.min_interactions);
        let loo = leave_one_out(&ds)?;
        let task = TaskData::from_leave_one_out(&ds, &loo, &vocab, d.max_history_tokens, d.max_item_tokens)?;
        let file = TaskFile {
            config_hash: run.hash.clone(),
            vocab_hash: vocab.hash(),
            task,
        };
        let mut text = serde_json::to_string(&file).map_err(std::io::Error::other)?;
        text.push('\n');
        let p = run.task_path(name);
        std::fs::create_dir_all(p.parent().expect("corpus dir"))?;
        std::fs::write(&p, text)?;
        log::info!("{name}: {} users, {} LM sequences", file.task.users.len(), file.task.lm_corpus.len());
    }
    Ok(())
}

fn model_config(run: &Run, vocab: &Vocab, rec_heads: usize) -> Result<ModelConfig, CliError> {
    let m = &run.config.model;
    let mut config = ModelConfig::for_vocab(vocab, m.n_layers, m.d_emb, m.n_heads, m.d_ffn, m.max_seq_len)?;
    config.tied_head = m.tied_head;
    config.rec_heads = rec_heads;
    Ok(config)
}

fn log_csv(log: &[LogRecord]) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut s = String::from("step,loss,l1,l2,lambda,lr,val_loss\n");
    for r in log {
        s.push_str(&format!(
            "{},{:?},{},{},{:?},{:?},{:?}\n",
            r.step,
            r.loss,
            opt(r.l1),
            opt(r.l2),
            r.lambda,
            r.lr,
            r.val_loss
        ));
    }
    s
}

fn save_outcome(run: &Run, out: &TrainOutcome, vocab: &Vocab, ckpt: &str, log: &str, kind: &str) -> Result<(), CliError> {
    let mut c = Checkpoint::new(out.model.clone(), vocab.hash(), out.best_step);
    c.meta.insert("config_hash".into(), run.hash.clone());
    c.meta.insert("kind".into(), kind.into());
    c.meta.insert("mode".into(), format!("{:?}", run.config.train.mode));
    let p = run.path(ckpt);
    std::fs::create_dir_all(p.parent().expect("checkpoint dir"))?;
    c.save(&p)?;
    run.write_stamped(log, &log_csv(&out.log))?;
    log::info!(
        "{kind}: best step {} (val {:.5}) after {} steps{}",
        out.best_step,
        out.best_val,
        out.steps_run,
        if out.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

pub fn train_cmd(run: &Run) -> Result<(), CliError> {
    let vocab = run.vocab()?;
    let c = &run.config;
    let task = run.task(&c.data.target)?;
    let agnostic: Vec<Vec<TokenId>> = run.tasks(&c.data.agnostic)?.into_iter().flat_map(|t| t.lm_corpus).collect();
    let model = Model::init(model_config(run, &vocab, 1)?, c.seed)?;
    let out = train(model, &task, &agnostic, &c.train)?;
    save_outcome(run, &out, &vocab, TRAINED, TRAIN_LOG, "trained")
}

pub fn pretrain_cmd(run: &Run) -> Result<(), CliError> {
    let vocab = run.vocab()?;
    let c = &run.config;
    let specific = run.tasks(&c.data.pretrain)?;
    let agnostic = run.tasks(&c.data.agnostic)?;
    if specific.is_empty() && agnostic.is_empty() {
        return Err(CliError::Config("data.pretrain and data.agnostic are both empty".into()));
    }
    let model = Model::init(model_config(run, &vocab, specific.len())?, c.seed)?;
    let spec_refs: Vec<&TaskData> = specific.iter().collect();
    let agn_refs: Vec<&[Vec<TokenId>]> = agnostic.iter().map(|t| t.lm_corpus.as_slice()).collect();
    let out = pretrain_multitask(model, &spec_refs, &agn_refs, &c.data.target, &c.train)?;
    save_outcome(run, &out, &vocab, PRETRAINED, PRETRAIN_LOG, "pretrained")
}

/// User features for `scope`, combined with the agnostic datasets.
fn user_table(run: &Run, model: &Model, ckpt_hash: &str, task: &TaskData, agnostic: &[TaskData], scope: HistoryScope) -> Result<FeatureTable, CliError> {
    let users: Vec<String> = task.users.iter().map(|u| u.user_id.clone()).collect();
    match run.config.transfer.combine {
        CombineMode::MeanPool => {
            let specific = extract_features(model, ckpt_hash, &user_inputs(task, scope)?, &task.name)?;
            let others = agnostic
                .iter()
                .map(|a| extract_features(model, ckpt_hash, &user_inputs(a, HistoryScope::TrainVal)?, &a.name))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(combine_features(&specific, &others, &users, CombineMode::MeanPool)?)
        }
        CombineMode::CombineInputs => {
            let mut inputs = Vec::with_capacity(users.len());
            for u in &task.users {
                let mut parts: Vec<&[TokenId]> = Vec::new();
                for a in agnostic {
                    if let Some(au) = a.users.iter().find(|x| x.user_id == u.user_id) {
                        parts.extend(au.train.iter().chain(&au.val).map(|&i| a.item_tokens[i].as_slice()));
                    }
                }
                let own = u.train.iter().chain(if scope == HistoryScope::TrainVal { u.val.as_slice() } else { &[] });
                parts.extend(own.map(|&i| task.item_tokens[i].as_slice()));
                let tokens = if parts.is_empty() {
                    Vec::new()
                } else {
                    join_history(&parts, task.sep, task.eoh, task.max_history_tokens)?
                };
                inputs.push((u.user_id.clone(), tokens));
            }
            let t = extract_features(model, ckpt_hash, &inputs, "combined")?;
            Ok(combine_features(&t, &[], &users, CombineMode::CombineInputs)?)
        }
    }
}

pub fn features(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let rel = match c.transfer.backbone {
        Backbone::Trained => TRAINED,
        Backbone::Pretrained => PRETRAINED,
    };
    let ckpt = run.checkpoint(rel)?;
    let task = run.task(&c.data.target)?;
    let agnostic = run.tasks(&c.data.agnostic)?;
    let vocab = run.vocab()?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(CliError::Data(format!("{rel} was trained with a different vocabulary")));
    }
    let h = ckpt.hash();
    let model = &ckpt.model;
    let items = extract_features(model, &h, &item_inputs(&task), &task.name)?;
    run.write_stamped(ITEMS, &items.to_text())?;
    for (rel, scope) in [(USERS_TRAIN, HistoryScope::Train), (USERS_EVAL, HistoryScope::TrainVal)] {
        let t = user_table(run, model, &h, &task, &agnostic, scope)?;
        run.write_stamped(rel, &t.to_text())?;
    }
    log::info!("features of {} users and {} items", task.users.len(), items.len());
    Ok(())
}

fn table(run: &Run, rel: &str) -> Result<FeatureTable, CliError> {
    Ok(FeatureTable::load(&run.require(rel, "feature table (run features)")?)?)
}

pub fn probe(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let users = table(run, USERS_TRAIN)?;
    let items = table(run, ITEMS)?;
    let task = run.task(&c.data.target)?;
    let pairs = probe_pairs(&task, c.transfer.probe.negatives_per_positive, c.seed)?;
    let probe = train_linear_probe(&users, &items, &pairs, &c.transfer.probe)?;
    run.write_stamped(PROBE, &probe_to_text(&probe))?;
    log::info!("probe trained on {} pairs", pairs.len());
    Ok(())
}

pub fn eval(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let task = run.task(&c.data.target)?;
    let (scorer, ckpt_hash): (Box<dyn Scorer>, String) = match c.eval.scorer {
        ScorerChoice::Model => {
            let ckpt = run.checkpoint(TRAINED)?;
            let h = ckpt.hash();
            (Box::new(LinearScorer::from_model(&ckpt.model, 0, &task, &h)?), h)
        }
        ScorerChoice::Probe => {
            let p = run.require(PROBE, "probe (run probe)")?;
            let probe = probe_from_text(&std::fs::read_to_string(p)?)?;
            let users = table(run, USERS_EVAL)?;
            let items = table(run, ITEMS)?;
            let h = items.checkpoint_hash.clone();
            (Box::new(LinearScorer::from_probe(&probe, &users, &items)?), h)
        }
    };
    let report = match c.eval.protocol {
        ProtocolChoice::Sampled => eval_sampled(scorer.as_ref(), &task, c.eval.negatives, &c.eval.ks, c.seed, &ckpt_hash)?,
        ProtocolChoice::Full => eval_full_rank(scorer.as_ref(), &task, &c.eval.ks, &ckpt_hash)?,
    };
    run.write_stamped(METRICS, &report.to_csv())?;
    for (k, (r, n)) in report.ks.iter().zip(report.recall.iter().zip(&report.ndcg)) {
        log::info!("Recall@{k} {r:.4}  NDCG@{k} {n:.4}  over {} users", report.n);
    }
    Ok(())
}

pub fn hessian(run: &Run) -> Result<(), CliError> {
    let ckpt = run.checkpoint(TRAINED)?;
    let task = run.task(&run.config.data.target)?;
    let report = model_eigs(&ckpt.model, &task, &run.config.curvature, &ckpt.hash())?;
    if report.warning() {
        log::warn!("some eigenvalue estimates did not converge; residuals are in {EIGS}");
    }
    run.write_stamped(EIGS, &report.to_csv())?;
    log::info!("eigenvalues {:?}", report.eigenvalues());
    Ok(())
}

/// Reads a metrics file written by `eval`.
pub fn load_metrics(path: &Path) -> Result<MetricsReport, CliError> {
    Ok(MetricsReport::load(path)?)
}
