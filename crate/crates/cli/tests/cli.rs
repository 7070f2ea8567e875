use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mlmass(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mlmass"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("MLMASS_SEEDS")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "mlmass {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn suite() -> Value {
    json!({
        "base_mono": 80,
        "base_vocab_size": 20,
        "len_range": [2, 6],
        "test_size": 8,
        "dev_size": 4,
        "subword_vocab": 80,
        "languages": [
            {"lang": "xa", "lexicon_seed": 1, "reorder": "adjacent_swap", "parallel": 80, "mono": 80},
            {"lang": "xb", "lexicon_seed": 2, "parallel": 80, "mono": 80}
        ]
    })
}

fn model() -> Value {
    json!({
        "n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "dropout": 0.0,
        "vocab_size": 0, "max_positions": 16, "tie_embeddings": true, "label_smoothing": 0.1
    })
}

fn policy() -> Value {
    json!({"temperature": 5.0, "mono_ratio": 0.5, "batch_size": 4, "max_len": 8, "seed": 0})
}

fn write_json(path: &Path, value: &Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn data_training_and_scoring_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(&d.join("suite.json"), &suite());

    let stats = stdout_json(&mlmass(&["make-synth", "--spec", "suite.json", "--out", "data"], d));
    assert_eq!(stats.as_array().unwrap().len(), 5, "{stats}");
    let again = stdout_json(&mlmass(&["corpus-stats", "--registry", "data/registry.json"], d));
    assert_eq!(stats, again);

    mlmass(
        &["build-vocab", "--input", "data/mono.en", "data/mono.xa", "--size", "40", "--langs", "en,xa", "--out", "v.txt"],
        d,
    );
    let vocab = fs::read_to_string(d.join("v.txt")).unwrap();
    assert!(vocab.contains("<2xa>") && vocab.contains("<2en>"));

    write_json(
        &d.join("train.json"),
        &json!({
            "registry": "data/registry.json",
            "vocab": "data/vocab.txt",
            "policy": policy(),
            "model": model(),
            "train": {"total_steps": 8, "warmup_steps": 2, "checkpoint_every": 4, "log_every": 1, "seed": 1}
        }),
    );
    let sample = stdout_json(&mlmass(&["sample-stats", "--config", "train.json", "--draws", "2000"], d));
    let frac = sample["mono_fraction"].as_f64().unwrap();
    assert!((frac - 0.5).abs() < 0.05, "{sample}");

    mlmass(&["train", "--config", "train.json", "--out", "run"], d);
    assert_eq!(fs::read_to_string(d.join("run/metrics.jsonl")).unwrap().lines().count(), 8);
    let before = fs::read(d.join("run/final/model.bin")).unwrap();
    mlmass(
        &["train", "--config", "train.json", "--out", "run", "--resume", "run/checkpoints/step-00000004"],
        d,
    );
    assert_eq!(before, fs::read(d.join("run/final/model.bin")).unwrap());

    let out = mlmass(&["translate", "--ckpt", "run/final", "--src", "data/test.xa", "--tgt-lang", "en"], d);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 8);
    let out = mlmass(
        &["translate", "--ckpt", "run/final", "--src", "data/test.xa", "--tgt-lang", "en", "--beam", "3"],
        d,
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 8);

    let bleu = stdout_json(&mlmass(
        &["evaluate", "--ckpt", "run/final", "--src", "data/test.xa", "--ref", "data/test.en", "--tgt-lang", "en"],
        d,
    ));
    assert!((0.0..=100.0).contains(&bleu["bleu"].as_f64().unwrap()));
    assert_eq!(bleu["precisions"].as_array().unwrap().len(), 4);
    assert!(d.join("data/test.hyp").exists());

    let pivot = stdout_json(&mlmass(
        &[
            "evaluate", "--ckpt", "run/final", "--src", "data/test.xa", "--ref", "data/test.xb", "--tgt-lang", "xb",
            "--pivot", "en", "--hyp-out", "pivot.hyp",
        ],
        d,
    ));
    assert!(pivot["bleu"].is_number());
    assert_eq!(fs::read_to_string(d.join("pivot.hyp")).unwrap().lines().count(), 8);
}

#[test]
fn grad_check_command_passes_on_default_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gc.json"), "{}").unwrap();
    let out = stdout_json(&mlmass(&["grad-check", "--config", "gc.json"], dir.path()));
    let checks = out.as_array().unwrap();
    assert_eq!(checks.len(), 2);
    for c in checks {
        assert_eq!(c["passed"], json!(true), "{c}");
        assert!(c["max_rel_error"].as_f64().unwrap() < 1e-4);
    }
}

#[test]
fn run_and_report_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(
        &d.join("exp.json"),
        &json!({
            "name": "cli",
            "suite": suite(),
            "arms": [{"arm": "bilingual"}, {"arm": "multilingual_mono"}],
            "policy": policy(),
            "model": model(),
            "train": {"total_steps": 4, "warmup_steps": 2, "checkpoint_every": 0, "log_every": 1},
            "directions": [{"src": "xa", "tgt": "en"}, {"src": "xa", "tgt": "xb", "pivot": "en"}],
            "seeds": [1, 2, 3]
        }),
    );
    let status = Command::new(env!("CARGO_BIN_EXE_mlmass"))
        .args(["run", "--config", "exp.json", "--out", "out"])
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env("MLMASS_SEEDS", "7")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let report = stdout_json(&mlmass(&["report", "--run", "out", "--format", "json"], d));
    assert_eq!(report["seeds"], json!([7]));
    assert_eq!(report["cells"].as_array().unwrap().len(), 4);
    let csv = String::from_utf8(mlmass(&["report", "--run", "out", "--format", "csv"], d).stdout).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv, fs::read_to_string(d.join("out/report.csv")).unwrap());
    let txt = String::from_utf8(mlmass(&["report", "--run", "out", "--format", "txt"], d).stdout).unwrap();
    assert!(txt.contains("multilingual_mono") && txt.contains("failed cells"));
}
