//! End-to-end runs of the `ecgnet` binary on a small synthetic corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecgnet::signal_io::{write_record, SignalFormat};
use ecgnet::synthetic::{generate, SyntheticConfig};

const SMALL: [&str; 8] = ["--arch", "cnn", "--scale", "0.0625", "--max-epochs", "2", "--batch-size", "4"];

/// Writes `n` short records plus `manifest.csv`, and returns the manifest path.
fn corpus(dir: &Path, n: usize) -> PathBuf {
    let cfg = SyntheticConfig {
        records: n,
        min_duration_s: 9.0,
        max_duration_s: 10.0,
        ..SyntheticConfig::default()
    };
    let ds = generate(&cfg, 4).unwrap();
    let mut manifest = String::new();
    for r in &ds.records {
        let rel = format!("{}.txt", r.id);
        write_record(r, &dir.join(&rel), SignalFormat::Text).unwrap();
        manifest.push_str(&format!("{},{},{}\n", r.id, rel, r.label.unwrap()));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).unwrap();
    path
}

fn ecgnet(args: &[&str], extra: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ecgnet"));
    cmd.args(args);
    for (flag, path) in extra {
        cmd.arg(flag).arg(path);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ecgnet(&["train", "--bogus"], &[]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 6);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = ecgnet(
        &["train"],
        &[("--manifest", &manifest), ("--out", &dir.path().join("m.bin")), ("--config", &config)],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn missing_signal_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 6);
    std::fs::remove_file(dir.path().join("syn0002.txt")).unwrap();
    let out = ecgnet(&["predict"], &[("--manifest", &manifest), ("--out", &dir.path().join("p.csv")), ("--checkpoint", &dir.path().join("none.bin"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("syn0002"), "{}", stderr(&out));
}

#[test]
fn exploding_learning_rate_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 15);
    let mut args = vec!["train", "--lr", "3e38", "--augment", "off"];
    args.extend(SMALL);
    let out = ecgnet(&args, &[("--manifest", &manifest), ("--out", &dir.path().join("m.bin"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("batch"), "{}", stderr(&out));
}

#[test]
fn train_then_predict_writes_one_row_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 15);
    let ckpt = dir.path().join("model").join("m.bin");
    let mut args = vec!["train"];
    args.extend(SMALL);
    let out = ecgnet(&args, &[("--manifest", &manifest), ("--out", &ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(ckpt.with_extension("train.jsonl")).unwrap();
    assert!((1..=2).contains(&log.lines().count()));
    assert!(dir.path().join("model").join("run.json").exists());

    // Predict on the first four records only.
    let text = std::fs::read_to_string(&manifest).unwrap();
    let four: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
    let small = dir.path().join("four.csv");
    std::fs::write(&small, four).unwrap();
    let preds = dir.path().join("preds.csv");
    let out = ecgnet(&["predict"], &[("--manifest", &small), ("--out", &preds), ("--checkpoint", &ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows: Vec<String> = std::fs::read_to_string(&preds).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "id,label");
    assert_eq!(rows.len(), 5);
    for (row, line) in rows[1..].iter().zip(text.lines()) {
        let id = line.split(',').next().unwrap();
        let (rid, label) = row.split_once(',').unwrap();
        assert_eq!(rid, id);
        assert!(["N", "A", "O", "~"].contains(&label), "{row}");
    }

    // Three copies of one model vote unanimously for its own prediction.
    let voted = dir.path().join("voted.csv");
    let out = ecgnet(
        &["predict"],
        &[("--manifest", &small), ("--out", &voted), ("--checkpoint", &ckpt), ("--checkpoint", &ckpt), ("--checkpoint", &ckpt)],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&voted).unwrap(), std::fs::read(&preds).unwrap());
}

#[test]
fn run_json_reproduces_a_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 15);
    let first = dir.path().join("a").join("m.bin");
    let mut args = vec!["train", "--seed", "9", "--burst-rate", "2", "--hr-range", "70,110", "--fold", "2"];
    args.extend(SMALL);
    let out = ecgnet(&args, &[("--manifest", &manifest), ("--out", &first)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let run_json = dir.path().join("a").join("run.json");
    let second = dir.path().join("b").join("m.bin");
    let out = ecgnet(&["train"], &[("--manifest", &manifest), ("--out", &second), ("--config", &run_json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(&run_json).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("b").join("run.json")).unwrap()).unwrap();
    assert_eq!(a["train"], b["train"]);
    assert_eq!(a["model"], b["model"]);
    assert_eq!(a["train"]["augment"]["hr_range_bpm"], serde_json::json!([70.0, 110.0]));
}

#[test]
fn preprocess_writes_a_spectrogram_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 4);
    let out_dir = dir.path().join("specs");
    let out = ecgnet(&["preprocess"], &[("--manifest", &manifest), ("--out", &out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for i in 0..4 {
        assert!(out_dir.join(format!("syn{i:04}.csv")).exists());
    }
}

#[test]
fn ensemble_writes_members_and_votes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 12);
    let out_dir = dir.path().join("ens");
    let mut args = vec!["ensemble", "--members", "2", "--fast"];
    args.extend(SMALL);
    let out = ecgnet(&args, &[("--manifest", &manifest), ("--out", &out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("member0.bin").exists() && out_dir.join("member1.bin").exists());
    let votes = std::fs::read_to_string(out_dir.join("votes.csv")).unwrap();
    assert_eq!(votes.lines().count(), 13);
    assert_eq!(votes.lines().next(), Some("id,label,votes,truth"));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.contains("\"report\":\"ensemble\""));
}
