//! End-to-end pipeline through the binary: synth -> train-quantizer ->
//! assign-sids -> train -> evaluate -> report, plus idempotence and error
//! handling contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn h2rec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_h2rec"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn h2rec");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tmp_root(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("h2rec_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_manifest(dir: &Path) -> serde_json::Value {
    let s = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str(&s).unwrap()
}

#[test]
fn full_pipeline_runs_and_is_idempotent() {
    let root = tmp_root("pipeline");
    let data = root.join("data");
    let quant = root.join("quant");
    let sids = root.join("sids");
    let run = root.join("run");
    let evaldir = root.join("eval");

    // Tiny synthetic world to keep the test quick.
    run_ok(
        h2rec()
            .args(["synth", "--out"])
            .arg(&data)
            .args(["--users", "120", "--items", "60", "--clusters", "6"])
            .args(["--d-sem", "16", "--seed", "7"]),
    );
    assert!(data.join("interactions.tsv").exists());
    assert!(data.join("embeddings.semb").exists());
    assert!(data.join("clusters.tsv").exists());

    run_ok(
        h2rec()
            .args(["train-quantizer", "--emb"])
            .arg(data.join("embeddings.semb"))
            .args(["--mech", "rq", "--L", "2", "--K", "8"])
            .args(["--d-code", "8", "--epochs", "10"])
            .args(["--out"])
            .arg(&quant),
    );
    assert!(quant.join("codebooks.scbk").exists());

    let out = run_ok(
        h2rec()
            .args(["assign-sids", "--emb"])
            .arg(data.join("embeddings.semb"))
            .args(["--codebooks"])
            .arg(quant.join("codebooks.scbk"))
            .args(["--out"])
            .arg(&sids),
    );
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("collision_rate"));
    assert!(stdout.contains("utilization_rate"));
    assert!(sids.join("sids.tsv").exists());

    run_ok(
        h2rec()
            .args(["train", "--data"])
            .arg(&data)
            .args(["--sids"])
            .arg(sids.join("sids.tsv"))
            .args(["--codebooks"])
            .arg(quant.join("codebooks.scbk"))
            .args(["--emb"])
            .arg(data.join("embeddings.semb"))
            .args(["--out"])
            .arg(&run)
            .args(["--epochs", "2", "--d", "8", "--L", "2", "--K", "8"])
            .args(["--max-len", "8", "--batch-size", "32", "--p", "1", "--seed", "5"]),
    );
    assert!(run.join("checkpoint.h2ck").exists());
    assert!(run.join("train_log.csv").exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,l_rec,l_ca,l_msg,total"));
    let manifest = read_manifest(&run);
    assert_eq!(manifest["command"], "train");

    run_ok(
        h2rec()
            .args(["evaluate", "--ckpt"])
            .arg(run.join("checkpoint.h2ck"))
            .args(["--data"])
            .arg(&data)
            .args(["--sids"])
            .arg(sids.join("sids.tsv"))
            .args(["--negatives", "20", "--seed", "5", "--out"])
            .arg(&evaldir),
    );
    assert!(evaldir.join("report.json").exists());

    // Idempotence: re-running evaluate reproduces identical bytes.
    let first = std::fs::read(evaldir.join("report.json")).unwrap();
    run_ok(
        h2rec()
            .args(["evaluate", "--ckpt"])
            .arg(run.join("checkpoint.h2ck"))
            .args(["--data"])
            .arg(&data)
            .args(["--sids"])
            .arg(sids.join("sids.tsv"))
            .args(["--negatives", "20", "--seed", "5", "--out"])
            .arg(&evaldir),
    );
    let second = std::fs::read(evaldir.join("report.json")).unwrap();
    assert_eq!(first, second, "evaluate must be idempotent");

    // report merges the run into a summary.
    let rep = root.join("merged");
    run_ok(
        h2rec()
            .args(["report", "--runs"])
            .arg(evaldir.join("report.json"))
            .arg(evaldir.join("report.json"))
            .args(["--out"])
            .arg(&rep),
    );
    let csv = std::fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert!(csv.contains("overall"));
    assert!(csv.contains("bucket5"));

    let _ = std::fs::remove_dir_all(&root);
}

#[test]
fn missing_checkpoint_gives_single_line_error() {
    let root = tmp_root("missing");
    let out = h2rec()
        .args(["evaluate", "--ckpt"])
        .arg(root.join("nope.h2ck"))
        .args(["--data"])
        .arg(&root)
        .args(["--sids"])
        .arg(root.join("sids.tsv"))
        .args(["--out"])
        .arg(root.join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.starts_with("error: "), "stderr was: {stderr}");
    assert!(stderr.contains("nope.h2ck"));
    assert_eq!(stderr.trim().lines().count(), 1, "single-line error contract");
    let _ = std::fs::remove_dir_all(&root);
}

#[test]
fn env_seed_overrides_flag() {
    let root = tmp_root("envseed");
    let a = root.join("a");
    let b = root.join("b");
    run_ok(
        h2rec()
            .env("H2REC_SEED", "99")
            .args(["synth", "--out"])
            .arg(&a)
            .args(["--users", "30", "--items", "20", "--clusters", "2"])
            .args(["--d-sem", "8", "--seed", "1"]),
    );
    run_ok(
        h2rec()
            .args(["synth", "--out"])
            .arg(&b)
            .args(["--users", "30", "--items", "20", "--clusters", "2"])
            .args(["--d-sem", "8", "--seed", "99"]),
    );
    let fa = std::fs::read(a.join("interactions.tsv")).unwrap();
    let fb = std::fs::read(b.join("interactions.tsv")).unwrap();
    assert_eq!(fa, fb, "H2REC_SEED must override --seed");
    let _ = std::fs::remove_dir_all(&root);
}

#[test]
fn bad_config_rejected_before_side_effects() {
    let root = tmp_root("badcfg");
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "unknown_field": 2}"#).unwrap();
    let out_dir = root.join("out");
    let out = h2rec()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--data"])
        .arg(&root)
        .args(["--sids"])
        .arg(root.join("sids.tsv"))
        .args(["--codebooks"])
        .arg(root.join("cb.scbk"))
        .args(["--emb"])
        .arg(root.join("e.semb"))
        .args(["--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out_dir.exists(), "no outputs on config failure");
    let _ = std::fs::remove_dir_all(&root);
}
