use std::path::{Path, PathBuf};
use std::process::Command;

const MINIMAL: &str = r#"
seed = 3

[synth]
n_users = 60
n_topics = 4

[[synth.services]]
name = "shop"
kind = "specific"
n_items = 40
history_len_range = [4, 8]

[[synth.services]]
name = "news"
kind = "agnostic"
n_items = 30
history_len_range = [3, 6]

[data]
target = "shop"
agnostic = ["news"]
max_history_tokens = 48

[model]
n_layers = 1
d_emb = 8
n_heads = 2
d_ffn = 16

[train]
total_steps = 30
eval_interval = 10
lm_batch_size = 2
rec_batch_size = 4
val_users = 10

[transfer.probe]
steps = 40
batch_size = 16

[eval]
negatives = 20
ks = [5, 10]

[curvature]
k = 2
max_iters = 30
batch_users = 3
"#;

fn textrec(config: &Path, out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_textrec"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("TEXTREC_OUTPUT_DIR", out)
        .env("TEXTREC_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, out: &Path, args: &[&str]) {
    let o = textrec(config, out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

const PIPELINE: [&str; 7] = ["synth-gen", "tokenizer-train", "corpus-build", "train", "features", "probe", "eval"];

#[test]
fn smoke_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), MINIMAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        for cmd in PIPELINE {
            ok(&config, out, &[cmd]);
        }
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("protocol,k,metric,value,n,seed,checkpoint_hash\n"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("sampled20,")).count(), 4);
    for rel in [
        "metrics.csv",
        "vocab.txt",
        "checkpoints/trained.ckpt",
        "train_log.csv",
        "features/items.tsv",
        "features/users.eval.tsv",
        "probe.txt",
        "data/shop.interactions.jsonl",
        "corpus/shop.task.json",
    ] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel} differs");
    }
    // Rerunning a command in place rewrites identical bytes.
    let before = std::fs::read(a.join("metrics.csv")).unwrap();
    ok(&config, &a, &["eval"]);
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), before);
}

#[test]
fn outputs_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), MINIMAL);
    let out = tmp.path().join("run");
    for cmd in ["synth-gen", "tokenizer-train", "corpus-build", "train", "hessian"] {
        ok(&config, &out, &[cmd]);
    }
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    let hash = resolved.lines().next().unwrap().strip_prefix("# config_hash ").unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for rel in ["vocab.txt", "train_log.csv", "eigs.csv", "corpus/shop.task.json", "data/shop.manifest.json"] {
        let text = std::fs::read_to_string(out.join(rel)).unwrap();
        assert!(text.contains(&hash), "{rel} lacks the config hash");
    }
    let ckpt = std::fs::read(out.join("checkpoints/trained.ckpt")).unwrap();
    assert!(ckpt.windows(hash.len()).any(|w| w == hash.as_bytes()));
    let eigs = std::fs::read_to_string(out.join("eigs.csv")).unwrap();
    assert_eq!(eigs.lines().filter(|l| l.starts_with("l2,")).count(), 2);
}

#[test]
fn report_rows_satisfy_the_loss_decomposition() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), MINIMAL);
    let run = tmp.path().join("run");
    for cmd in ["synth-gen", "tokenizer-train", "corpus-build", "train"] {
        ok(&config, &run, &[cmd]);
    }
    let out = tmp.path().join("report");
    let o = textrec(&config, &out, &["report", "--runs", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let value = |metric: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(&format!("joint/probe,{metric},"))).unwrap_or_else(|| panic!("{metric} missing:\n{csv}"));
        line.split(',').nth(2).unwrap().parse().unwrap()
    };
    let (l, l1, l2) = (value("final L"), value("final L1"), value("final L2"));
    assert!(l > l1 && l2 > 0.0);
    assert!(value("|L - (L1 + lambda*L2)|") < 1e-9);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let bad = write_config(tmp.path(), "[model]\nd_emb = 15\nn_heads = 2\n");
    let o = textrec(&bad, &out, &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.n_heads"));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(textrec(&missing, &out, &["train"]).status.code(), Some(1));

    let config = write_config(tmp.path(), MINIMAL);
    let o = textrec(&config, &out, &["corpus-build"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocab"));
}
