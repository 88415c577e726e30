use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[data]
train = ["synth/train"]
val = ["synth/val"]
test = ["synth/test"]

[synth]
train_sweeps = 2
val_sweeps = 1
test_sweeps = 1

[synth.phantom]
volume_dims_voxels = [55, 32, 120]
voxel_mm = 1.4
image_size = [32, 32]
sweep_length_frames = 40

[encoder]
input_size = [16, 16]
stem_channels = 4
stem_stride = 1
conv_stages = [{ channels = 4, blocks = 1, stride = 1 }, { channels = 8, blocks = 1, stride = 2 }]
embedding_dim = 8
mlp_layers = 2
mlp_width = 16

[training]
batch_size = 8
desk_epochs = 2

[evaluation]
queries_per_sweep = 5
half_width = 5
"#;

fn sweepmatch(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sweepmatch"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("every stdout line is JSON"))
        .collect()
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sweepmatch(&["train", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(sweepmatch(&["train", "--baseline", "simclr"], dir.path()).status.code(), Some(2));
    assert_eq!(sweepmatch(&["evaluate", "--ablation", "p3"], dir.path()).status.code(), Some(2));
    assert_eq!(sweepmatch(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[loss]\ntemperature = 1.0\n").unwrap();
    let out = sweepmatch(&["train", "--config", "bad.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["event"], "error");
    assert!(err["message"].as_str().unwrap().contains("temperature"));
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();

    let out = sweepmatch(&["gen-synth", "--config", "tiny.toml", "--out", "synth"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweeps = json_lines(&out);
    assert_eq!(sweeps.len(), 4);
    assert!(d.join("synth/test/phantom-0-003/manifest.json").is_file());

    let out = sweepmatch(&["train", "--config", "tiny.toml", "--desk", "--seed", "3", "--out", "run"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let events = json_lines(&out);
    assert_eq!(events[0]["event"], "config");
    assert_eq!(events[0]["config"]["effective"]["training"]["seed"], 3);
    assert_eq!(events[0]["config"]["effective"]["training"]["max_epochs"], 2);
    assert!(events[0]["config"]["source"].as_str().unwrap().contains("[synth.phantom]"));
    assert!(events[0]["version"].is_string());
    assert_eq!(events.iter().filter(|e| e["event"] == "epoch").count(), 2);
    assert_eq!(events.last().unwrap()["event"], "trained");
    assert!(d.join("run/best.swmc").is_file());

    let out = sweepmatch(
        &["build-index", "--checkpoint", "run/best.swmc", "--sweep", "synth/test/phantom-0-003", "--out", "run"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let idx = &json_lines(&out)[0];
    assert_eq!(idx["entries"], 40);
    assert!(d.join("run/phantom-0-003.swix").is_file());

    let frame = "synth/test/phantom-0-003/frames/000007.pgm";
    let out = sweepmatch(&["query", "--index", "run/phantom-0-003.swix", "--image", frame], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &json_lines(&out)[0];
    assert!(r["status"] == "matched" || r["status"] == "rejected");
    assert!(r["score"].is_number());

    let out = sweepmatch(&["evaluate", "--config", "tiny.toml", "--baseline", "ncc", "--out", "run"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep = &json_lines(&out)[0];
    assert_eq!(rep["baseline"], "ncc");
    assert_eq!(rep["report"]["n_queries"], 5);
    assert_eq!(rep["report"]["rejection_rate"], 0.0);
    assert!(d.join("run/report-ncc.json").is_file());

    let out = sweepmatch(&["evaluate", "--config", "tiny.toml", "--checkpoint", "run/best.swmc"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_lines(&out)[0]["baseline"], "ours");

    let out = sweepmatch(&["evaluate", "--config", "tiny.toml", "--baseline", "ivpp"], d);
    assert_eq!(out.status.code(), Some(1));
}
