use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_partial-ner")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn generate_corrupt_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["generate", "--out", p(d), "--sentences", "300", "--seed", "4"]);
    let (train, dev, test) = (d.join("train.conll"), d.join("dev.conll"), d.join("test.conll"));

    let stats = json(&run(&["stats", "--in", p(&train)]));
    assert_eq!(stats["sentences"], 180);
    let spans = stats["annotations"].as_u64().unwrap();

    let partial = d.join("partial.conll");
    let out = run(&["corrupt", "--scheme", "rar", "--rate", "0.5", "--seed", "1", "--in", p(&train), "--out", p(&partial)]);
    let want = (0.5 * spans as f64).round() as u64;
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("removed {want} of {spans}")));
    let again = d.join("again.conll");
    run(&["corrupt", "--scheme", "rar", "--rate", "0.5", "--seed", "1", "--in", p(&train), "--out", p(&again)]);
    assert_eq!(fs::read(&partial).unwrap(), fs::read(&again).unwrap());

    let model = d.join("model.bin");
    let log = d.join("log.jsonl");
    run(&[
        "train", "--train", p(&partial), "--dev", p(&dev), "--out", p(&model), "--epochs", "4", "--eer-target", "0.05",
        "--learning-rate", "1.0", "--log", p(&log),
    ]);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4);

    let pred = d.join("pred.conll");
    let prf = json(&run(&["eval", "--model", p(&model), "--test", p(&test), "--pred-out", p(&pred)]));
    assert!(prf["f1"].as_f64().unwrap() > 0.5, "{prf}");
    let pred_stats = json(&run(&["stats", "--in", p(&pred)]));
    assert_eq!(pred_stats["sentences"], 90);
}

#[test]
fn self_training_writes_round_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["generate", "--out", p(d), "--sentences", "200"]);
    let (train, dev) = (d.join("train.conll"), d.join("dev.conll"));
    let partial = d.join("partial.conll");
    run(&["corrupt", "--scheme", "rsfr", "--rate", "0.6", "--in", p(&train), "--out", p(&partial)]);
    let log = d.join("log.jsonl");
    run(&[
        "train", "--train", p(&partial), "--dev", p(&dev), "--out", p(&d.join("m.bin")), "--epochs", "6",
        "--self-train", "--begin-step", "4", "--period", "4", "--max-rounds", "2", "--gold", p(&train), "--log",
        p(&log),
    ]);
    let rounds: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter_map(|v| v.get("round").cloned())
        .collect();
    assert_eq!(rounds.len(), 2);
    assert!(rounds[0]["precision_vs_gold"].is_number());
}

#[test]
fn convert_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bio = d.join("a.bio");
    fs::write(&bio, "p53\tB-Gene\nbinds\tO\nIL-2\tB-Gene\nR\tI-Gene\n\nnone\tO\n\n").unwrap();
    let bilou = d.join("a.bilou");
    run(&["convert", "--in", p(&bio), "--out", p(&bilou), "--to", "bilou"]);
    assert!(fs::read_to_string(&bilou).unwrap().starts_with("p53\tU-Gene\nbinds\tO\nIL-2\tB-Gene\nR\tL-Gene\n"));
    let back = d.join("b.bio");
    run(&["convert", "--in", p(&bilou), "--out", p(&back), "--to", "bio"]);
    assert_eq!(fs::read_to_string(&back).unwrap(), fs::read_to_string(&bio).unwrap());

    let broken = d.join("broken.bio");
    fs::write(&broken, "x I-Gene\ny O\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_partial-ner"))
        .args(["convert", "--in", p(&broken), "--out", p(&d.join("x")), "--to", "bilou"])
        .output()
        .unwrap();
    assert!(!status.status.success());
    run(&["convert", "--in", p(&broken), "--out", p(&d.join("x")), "--to", "bilou", "--repair"]);
}

#[test]
fn experiment_resumes_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(&["generate", "--out", p(d), "--sentences", "150"]);
    let cfg = d.join("grid.json");
    fs::write(
        &cfg,
        r#"{"rates": [0.5], "schemes": ["rar"], "seeds": [0], "models": ["full_crf", "partial_crf"],
            "loss": {"max_epochs": 2, "feature_dim": 4096}}"#,
    )
    .unwrap();
    let out = d.join("out");
    let (train, dev, test) = (d.join("train.conll"), d.join("dev.conll"), d.join("test.conll"));
    let args = [
        "experiment", "--out", p(&out), "--config", p(&cfg), "--train", p(&train), "--dev", p(&dev),
        "--test", p(&test),
    ];
    let first = run(&args);
    assert!(String::from_utf8_lossy(&first.stderr).contains("3 results (3 trained, 0 cached)"));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for f in ["aggregate_per_rate.csv", "aggregate_band.csv", "fig_f1.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let second = run(&args);
    assert!(String::from_utf8_lossy(&second.stderr).contains("(0 trained, 3 cached)"));
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), csv);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"ratez": [0.1]}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_partial-ner"))
        .args(["experiment", "--out", p(dir.path()), "--config", p(&cfg)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratez"));
}
