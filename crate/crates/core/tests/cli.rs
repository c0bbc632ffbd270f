//! End-to-end command-line checks driving the compiled binary:
//! generation determinism, a smoke-scale training run, evaluation /
//! prediction / feature-export outputs, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn beatkit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_beatkit"))
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{} failed (status {:?}):\n{}",
        what,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Small cohort + small network configuration shared by the tests.
const SMOKE_CONFIG: &str = "
seed = 5
synth.nsr_subjects = 8
synth.af_subjects = 6
synth.segments_per_subject = 15
synth.dropout_prob = 0.4
synth.noise_sigma = 0.3
synth.wander_amp = 0.6
synth.spike_rate = 0.2
net.stages = 8,7,4,nobn; 12,5,4,bn; 16,5,none,bn
net.dense_width = 16
net.enforce_architecture = false
train.batch_size = 16
train.epochs = 2
train.mode = weight-sample
infer.mc_draws = 8
";

#[test]
fn full_cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(&config, SMOKE_CONFIG);
    let data_dir = dir.path().join("data");

    // gen-data: files exist, deterministic byte-for-byte.
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "gen-data", "--out"])
        .arg(&data_dir)
        .output()
        .unwrap();
    assert_success(&out, "gen-data");
    for name in ["train.bbseg", "val.bbseg", "test.bbseg", "split.json"] {
        assert!(data_dir.join(name).exists(), "{} missing", name);
    }
    let first = fs::read(data_dir.join("train.bbseg")).unwrap();

    let data_dir2 = dir.path().join("data2");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "gen-data", "--out"])
        .arg(&data_dir2)
        .output()
        .unwrap();
    assert_success(&out, "gen-data rerun");
    let second = fs::read(data_dir2.join("train.bbseg")).unwrap();
    assert_eq!(first, second, "same seed must regenerate identical files");

    // Segment counts match the spec: 14 subjects x 15 segments.
    let segments = beatkit::data::load_segments(&data_dir.join("train.bbseg")).unwrap();
    let val = beatkit::data::load_segments(&data_dir.join("val.bbseg")).unwrap();
    let test = beatkit::data::load_segments(&data_dir.join("test.bbseg")).unwrap();
    assert_eq!(segments.len() + val.len() + test.len(), 14 * 15);
    assert!(segments
        .iter()
        .all(|s| s.samples.iter().all(|&v| (0.0..=1.0).contains(&v))));

    // train: completes quickly at smoke scale, writes checkpoint + log.
    let ckpt = dir.path().join("model.bbkt");
    let log = dir.path().join("run.log");
    let t0 = Instant::now();
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "train"])
        .args(["--train"])
        .arg(data_dir.join("train.bbseg"))
        .args(["--val"])
        .arg(data_dir.join("val.bbseg"))
        .args(["--out"])
        .arg(&ckpt)
        .args(["--log"])
        .arg(&log)
        .output()
        .unwrap();
    assert_success(&out, "train");
    assert!(t0.elapsed().as_secs() < 60, "smoke training took {:?}", t0.elapsed());
    assert!(ckpt.exists());
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 2, "one JSON line per epoch");
    for line in log_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("epoch").is_some() && v.get("val_f1").is_some());
    }

    // Re-training with the same seed reproduces the checkpoint bytes.
    let ckpt2 = dir.path().join("model2.bbkt");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "train"])
        .args(["--train"])
        .arg(data_dir.join("train.bbseg"))
        .args(["--val"])
        .arg(data_dir.join("val.bbseg"))
        .args(["--out"])
        .arg(&ckpt2)
        .output()
        .unwrap();
    assert_success(&out, "train rerun");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    // eval: one report row per threshold, plus CSV.
    let json_path = dir.path().join("reports.json");
    let csv_path = dir.path().join("reports.csv");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "eval"])
        .args(["--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(data_dir.join("test.bbseg"))
        .args(["--thresholds", "none,0.05,0.01"])
        .args(["--out-json"])
        .arg(&json_path)
        .args(["--out-csv"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert_success(&out, "eval");
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per threshold");
    assert!(csv.lines().next().unwrap().starts_with("threshold,abstention_rate,"));

    // predict: JSON-lines records with the documented fields; abstained
    // records flagged, not dropped.
    let preds_path = dir.path().join("preds.jsonl");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "predict"])
        .args(["--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(data_dir.join("test.bbseg"))
        .args(["--out"])
        .arg(&preds_path)
        .args(["--threshold", "0.05"])
        .output()
        .unwrap();
    assert_success(&out, "predict");
    let preds_text = fs::read_to_string(&preds_path).unwrap();
    assert_eq!(preds_text.lines().count(), test.len());
    for line in preds_text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for field in ["segment_id", "p_af", "u_scalar", "label", "accepted"] {
            assert!(v.get(field).is_some(), "missing field {}", field);
        }
    }

    // export-features: CSV with segment_id, label, and feature columns;
    // deterministic across runs.
    let feats = dir.path().join("features.csv");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "export-features"])
        .args(["--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(data_dir.join("test.bbseg"))
        .args(["--out"])
        .arg(&feats)
        .output()
        .unwrap();
    assert_success(&out, "export-features");
    let text = fs::read_to_string(&feats).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("segment_id,label,f0,"));
    assert_eq!(header.split(',').count(), 2 + 16);
    assert_eq!(lines.count(), test.len());

    let feats2 = dir.path().join("features2.csv");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "export-features"])
        .args(["--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(data_dir.join("test.bbseg"))
        .args(["--out"])
        .arg(&feats2)
        .output()
        .unwrap();
    assert_success(&out, "export-features rerun");
    assert_eq!(fs::read(&feats).unwrap(), fs::read(&feats2).unwrap());
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(&config, SMOKE_CONFIG);
    let data_dir = dir.path().join("data");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "gen-data", "--out"])
        .arg(&data_dir)
        .output()
        .unwrap();
    assert_success(&out, "gen-data");

    let mut checkpoints = Vec::new();
    for threads in ["1", "2"] {
        let ckpt = dir.path().join(format!("model_t{}.bbkt", threads));
        let out = beatkit()
            .args(["--config", config.to_str().unwrap(), "--threads", threads, "train"])
            .args(["--train"])
            .arg(data_dir.join("train.bbseg"))
            .args(["--val"])
            .arg(data_dir.join("val.bbseg"))
            .args(["--out"])
            .arg(&ckpt)
            .output()
            .unwrap();
        assert_success(&out, "train");
        checkpoints.push(fs::read(&ckpt).unwrap());
    }
    assert_eq!(
        checkpoints[0], checkpoints[1],
        "thread count changed the training result"
    );
}

#[test]
fn missing_data_file_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(&config, SMOKE_CONFIG);
    let ckpt = dir.path().join("model.bbkt");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "train"])
        .args(["--train", "/nonexistent/path.bbseg"])
        .args(["--val", "/nonexistent/other.bbseg"])
        .args(["--out"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "data errors exit with 2");
    assert!(!ckpt.exists(), "no partial checkpoint on failure");
}

#[test]
fn usage_errors_exit_with_one() {
    // Unknown config key.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    write_config(&config, "bogus.key = 1\n");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "gen-data", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown flag.
    let out = beatkit().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Invalid threshold.
    write_config(&config, SMOKE_CONFIG);
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "predict"])
        .args(["--checkpoint", "/nonexistent.bbkt"])
        .args(["--data", "/nonexistent.bbseg"])
        .args(["--out"])
        .arg(dir.path().join("p.jsonl"))
        .args(["--threshold", "banana"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn subject_overlap_between_splits_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    write_config(&config, SMOKE_CONFIG);
    let data_dir = dir.path().join("data");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "gen-data", "--out"])
        .arg(&data_dir)
        .output()
        .unwrap();
    assert_success(&out, "gen-data");

    // Use the train file for both sides: guaranteed overlap.
    let ckpt = dir.path().join("model.bbkt");
    let out = beatkit()
        .args(["--config", config.to_str().unwrap(), "train"])
        .args(["--train"])
        .arg(data_dir.join("train.bbseg"))
        .args(["--val"])
        .arg(data_dir.join("train.bbseg"))
        .args(["--out"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("appears in both"));
    assert!(!ckpt.exists());
}
