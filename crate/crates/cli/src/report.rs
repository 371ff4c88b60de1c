//! Aggregation of finished runs into mean ± std tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use textrec::eval::mean_std;

use crate::commands::{load_metrics, Run, METRICS, TRAIN_LOG};
use crate::config::{RunConfig, RESOLVED_NAME};
use crate::error::CliError;

/// Final logged losses of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalLosses {
    pub loss: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub lambda: f64,
}

impl FinalLosses {
    /// `|L − (L1 + λ·L2)|` when both parts exist, else 0.
    pub fn decomposition_error(&self) -> f64 {
        match (self.l1, self.l2) {
            (Some(a), Some(b)) => (self.loss - (a + self.lambda * b)).abs(),
            _ => 0.0,
        }
    }
}

pub fn read_train_log(path: &Path) -> Result<Option<FinalLosses>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let Some(line) = text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("step")).last() else {
        return Ok(None);
    };
    let f: Vec<&str> = line.split(',').collect();
    let bad = || CliError::Data(format!("{}: malformed row {line:?}", path.display()));
    if f.len() != 7 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    Ok(Some(FinalLosses {
        loss: num(f[1])?,
        l1: opt(f[2])?,
        l2: opt(f[3])?,
        lambda: num(f[4])?,
    }))
}

/// Runs are grouped by training mode and scorer; everything else (seed
/// and output location) varies within a group.
fn group_of(dir: &Path) -> Result<String, CliError> {
    let p = dir.join(RESOLVED_NAME);
    if !p.exists() {
        return Err(CliError::missing("resolved config", &p));
    }
    let c = RunConfig::load(&p)?;
    let mode = serde_json::to_value(c.train.mode).map_err(std::io::Error::other)?;
    let scorer = serde_json::to_value(c.eval.scorer).map_err(std::io::Error::other)?;
    Ok(format!("{}/{}", mode.as_str().unwrap_or("?"), scorer.as_str().unwrap_or("?")))
}

#[derive(Default)]
struct Rows(BTreeMap<(String, String), Vec<f64>>);

impl Rows {
    fn push(&mut self, group: &str, metric: String, v: f64) {
        self.0.entry((group.to_string(), metric)).or_default().push(v);
    }
}

pub fn report(run: &Run, runs: &[PathBuf]) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one --runs directory".into()));
    }
    let mut rows = Rows::default();
    for dir in runs {
        let group = group_of(dir)?;
        let metrics = dir.join(METRICS);
        if metrics.exists() {
            let r = load_metrics(&metrics)?;
            let tag = r.protocol.tag();
            for (j, k) in r.ks.iter().enumerate() {
                rows.push(&group, format!("{tag} Recall@{k}"), r.recall[j]);
                rows.push(&group, format!("{tag} NDCG@{k}"), r.ndcg[j]);
            }
        }
        let log = dir.join(TRAIN_LOG);
        if log.exists() {
            if let Some(f) = read_train_log(&log)? {
                rows.push(&group, "final L".into(), f.loss);
                if let Some(a) = f.l1 {
                    rows.push(&group, "final L1".into(), a);
                }
                if let Some(b) = f.l2 {
                    rows.push(&group, "final L2".into(), b);
                }
                rows.push(&group, "|L - (L1 + lambda*L2)|".into(), f.decomposition_error());
            }
        }
    }
    let mut csv = String::from("group,metric,mean,std,runs\n");
    let mut md = String::from("| group | metric | mean ± std | runs |\n|---|---|---|---|\n");
    for ((group, metric), values) in &rows.0 {
        let (m, s) = mean_std(values);
        csv.push_str(&format!("{group},{metric},{m:?},{s:?},{}\n", values.len()));
        md.push_str(&format!("| {group} | {metric} | {m:.4} ± {s:.4} | {} |\n", values.len()));
    }
    run.write_stamped("report.csv", &csv)?;
    run.write_raw("report.md", &format!("{md}\n<!-- config_hash {} -->\n", run.hash))?;
    print!("{md}");
    Ok(())
}
