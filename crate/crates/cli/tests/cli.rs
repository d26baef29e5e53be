use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "gen": {"n_users": 120, "n_items": 80, "n_streamers": 10, "seed": 2},
  "model": {"embed_dim": 8, "layer_dims": [8, 4], "mlp_hidden": 8},
  "train": {"max_epochs": 2, "batch_size": 256, "lr": 0.01},
  "analysis": {"n_mc": 3000, "n_pairs": 200},
  "repeat_count": 1
}"#;

fn lsec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lsec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = lsec(args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    let line = err.lines().last().unwrap_or("");
    assert!(line.starts_with("error: code="), "{line}");
    assert!(line.contains(" msg="), "{line}");
    line.to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    raw: PathBuf,
    split: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let manifest = root.join("m.json");
    fs::write(&manifest, TINY).unwrap();
    let raw = root.join("raw");
    let split = root.join("split");
    ok(&["generate", "--manifest", s(&manifest), "--out", s(&raw)]);
    ok(&["split", "--manifest", s(&manifest), "--data", s(&raw), "--out", s(&split)]);
    Fixture {
        _dir: dir,
        root,
        manifest,
        raw,
        split,
    }
}

#[test]
fn generate_and_split_layout() {
    let f = fixture();
    for name in ["buy.tsv", "follow.tsv", "sell.tsv", "gen.json"] {
        assert!(f.raw.join(name).is_file(), "{name}");
    }
    let report: Value = serde_json::from_slice(&fs::read(f.split.join("split.json")).unwrap()).unwrap();
    for key in ["train_count", "val_count", "test_count", "dropped_count"] {
        assert!(report[key].is_u64(), "{key}");
    }
    assert!(f.split.join("train/buy.tsv").is_file());
    assert!(f.split.join("val.tsv").is_file());
    assert!(f.split.join("test.tsv").is_file());

    // regenerating with the same seed is byte-identical
    let again = f.root.join("raw2");
    ok(&["generate", "--manifest", s(&f.manifest), "--out", s(&again)]);
    assert_eq!(
        fs::read(f.raw.join("buy.tsv")).unwrap(),
        fs::read(again.join("buy.tsv")).unwrap()
    );
}

#[test]
fn train_is_reproducible_and_echoes_config() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.root.join(name);
        ok(&[
            "train",
            "--manifest",
            s(&f.manifest),
            "--data",
            s(&f.split),
            "--seed",
            "7",
            "--out",
            s(&out),
        ]);
        out
    };
    let a = run("a");
    let b = run("b");
    for file in ["metrics.json", "history.json", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let metrics: Value = serde_json::from_slice(&fs::read(a.join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["test"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let echoed: Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["seed"], 7);
    assert_eq!(echoed["train"]["patience"], 3);
    assert_eq!(echoed["model"]["negative_ratio"], 4);

    // rerunning from the echoed config reproduces the run
    let c = f.root.join("c");
    ok(&["train", "--manifest", s(&a.join("config.json")), "--out", s(&c)]);
    assert_eq!(
        fs::read(a.join("metrics.json")).unwrap(),
        fs::read(c.join("metrics.json")).unwrap()
    );
}

#[test]
fn evaluate_and_export() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--manifest", s(&f.manifest), "--data", s(&f.split), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.bin");

    let csv = f.root.join("users.csv");
    let metrics_path = f.root.join("eval.json");
    ok(&[
        "evaluate",
        "--data",
        s(&f.split),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&metrics_path),
        "--per-user",
        s(&csv),
    ]);
    let metrics: Value = serde_json::from_slice(&fs::read(&metrics_path).unwrap()).unwrap();
    let from_train: Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, from_train["test"]);
    let csv = fs::read_to_string(&csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("user_id,auc,mrr,ndcg10,ndcg50,recall10,recall50"));
    assert_eq!(
        lines.count() as u64,
        metrics["n_users_evaluated"].as_u64().unwrap()
    );

    let val = ok(&["evaluate", "--data", s(&f.split), "--checkpoint", s(&ckpt), "--split", "val"]);
    let val: Value = serde_json::from_str(&val).unwrap();
    assert_eq!(val, from_train["val"]);

    let tsv = f.root.join("emb.tsv");
    ok(&["export-embeddings", "--data", s(&f.split), "--checkpoint", s(&ckpt), "--out", s(&tsv)]);
    let text = fs::read_to_string(&tsv).unwrap();
    let streamers: Vec<String> = fs::read_to_string(f.split.join("train/follow.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().to_string())
        .collect();
    let mut kinds = std::collections::BTreeMap::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "{line}");
        let width = fields[2].split(',').map(|v| v.parse::<f64>().unwrap()).count();
        // two relations per kind, 4 output dims each
        assert_eq!(width, 8);
        assert!(fields[3] == "NA" || streamers.iter().any(|s| s == fields[3]), "{line}");
        if fields[0] == "streamer" {
            assert_eq!(fields[1], fields[3]);
        }
        *kinds.entry(fields[0].to_string()).or_insert(0) += 1;
    }
    assert_eq!(kinds.len(), 3);
    assert_eq!(kinds["streamer"], 10);
}

#[test]
fn analyze_reports_both_settings_and_ratio() {
    let f = fixture();
    let json = f.root.join("report.json");
    let text = ok(&[
        "analyze",
        "--manifest",
        s(&f.manifest),
        "--data",
        s(&f.raw),
        "--setting",
        "S1",
        "--setting",
        "S2",
        "--out",
        s(&json),
    ]);
    assert!(text.contains("ratio S1/S2"));
    let report: Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    let probs = report["probabilities"].as_array().unwrap();
    assert_eq!(probs.len(), 2);
    let p1 = probs[0]["probability"].as_f64().unwrap();
    let p2 = probs[1]["probability"].as_f64().unwrap();
    let ratio = report["ratio"].as_f64().unwrap();
    assert!((ratio - p1 / p2).abs() < 1e-12);
}

#[test]
fn ablate_runs_the_grid() {
    let f = fixture();
    let out = f.root.join("abl");
    let table = ok(&["ablate", "--manifest", s(&f.manifest), "--data", s(&f.split), "--out", s(&out)]);
    let rows: Vec<Vec<String>> = table
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().take(2).map(String::from).collect())
        .collect();
    let expected = [["0", "0"], ["0,1", "0"], ["0,2", "0"], ["0,1,2", "0"], ["0,1,2", "0,1"]];
    assert_eq!(rows.len(), 5);
    for (row, want) in rows.iter().zip(expected) {
        assert_eq!(row, &want);
    }
    let json: Value = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 5);
    assert_eq!(json[0]["runs"].as_array().unwrap().len(), 1);
}

#[test]
fn error_exit_codes() {
    let f = fixture();
    let line = fails_with(&["frobnicate"], 1);
    assert!(line.starts_with("error: code=usage"));
    fails_with(&["train", "--bogus-flag"], 1);

    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    fails_with(&["train", "--manifest", s(&bad), "--out", s(&f.root.join("x"))], 1);
    fails_with(&["train", "--manifest", s(&f.manifest)], 1);

    let broken = f.root.join("broken");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("buy.tsv"), "u1\ti1\tnot-a-time\n").unwrap();
    fs::write(broken.join("follow.tsv"), "").unwrap();
    fs::write(broken.join("sell.tsv"), "").unwrap();
    let line = fails_with(&["split", "--data", s(&broken), "--out", s(&f.root.join("y"))], 2);
    assert!(line.starts_with("error: code=parse"));

    fails_with(
        &["evaluate", "--data", s(&f.split), "--checkpoint", s(&f.manifest)],
        2,
    );

    let out = Command::new(env!("CARGO_BIN_EXE_lsec"))
        .args(["split", "--data", s(&f.raw), "--out", s(&f.root.join("z"))])
        .env("LSEC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_cap_does_not_change_results() {
    let f = fixture();
    let run = |threads: &str, name: &str| {
        let out = f.root.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_lsec"))
            .args(["train", "--manifest", s(&f.manifest), "--data", s(&f.split), "--out", s(&out)])
            .env("LSEC_THREADS", threads)
            .stdout(std::process::Stdio::null())
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out.join("metrics.json")).unwrap()
    };
    assert_eq!(run("1", "one"), run("3", "three"));
}
