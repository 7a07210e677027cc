use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
layers = 3
width = 8

[lora]
rank = 2

[runtime]
seed = 5
output_dir = "run"

[[sequence]]
id = "A1"
modality = "A"
data = "synth:11:1:3"
steps = 20

[[sequence]]
id = "B1"
modality = "B"
data = "synth:22:1:3"
steps = 20

[[sequence]]
id = "A2"
modality = "A"
data = "synth:11:2:3"
steps = 20
"#;

fn mslora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mslora"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(cfg: &Path) -> PathBuf {
    let run = cfg.parent().unwrap().join("run");
    let out = mslora(&["train", s(cfg), "--output", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    run
}

#[test]
fn train_writes_run_layout() {
    let (_dir, cfg) = setup();
    let run = train(&cfg);
    for f in [
        "config.echo",
        "report.json",
        "trace.csv",
        "exports/similarity.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    for k in 0..3 {
        assert!(run
            .join(format!("checkpoints/task_{k}/manifest.json"))
            .is_file());
    }
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,ce,cr,ortho,total,lr");
    assert_eq!(trace.lines().count(), 61);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 3);
}

#[test]
fn resume_of_finished_run_is_a_noop() {
    let (_dir, cfg) = setup();
    let run = train(&cfg);
    let report = fs::read(run.join("report.json")).unwrap();
    let out = mslora(&[
        "train",
        s(&cfg),
        "--output",
        s(&run),
        "--resume",
        s(&run.join("checkpoints/task_2")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("nothing to train"));
    assert_eq!(fs::read(run.join("report.json")).unwrap(), report);
}

#[test]
fn resume_from_middle_matches_uninterrupted_run() {
    let (dir, cfg) = setup();
    let run = train(&cfg);
    let other = dir.path().join("resumed");
    let out = mslora(&[
        "train",
        s(&cfg),
        "--output",
        s(&other),
        "--resume",
        s(&run.join("checkpoints/task_0")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let last = "checkpoints/task_2/manifest.json";
    assert_eq!(
        fs::read(run.join(last)).unwrap(),
        fs::read(other.join(last)).unwrap()
    );
}

#[test]
fn unknown_key_reports_line_and_exits_1() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[model]\nlayers = 3\nwidht = 8\n").unwrap();
    let out = mslora(&["train", s(&cfg)]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("widht") && err.contains("line 3"), "{err}");
}

#[test]
fn default_output_dir_is_relative_to_working_dir() {
    let (dir, cfg) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_mslora"))
        .args(["train", s(&cfg)])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("run/report.json").is_file());
}

#[test]
fn invalid_value_exits_1() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, SMALL.replace("rank = 2", "rank = 0")).unwrap();
    assert_eq!(code(&mslora(&["train", s(&cfg)])), 1);
}

#[test]
fn verify_suites_pass_on_checkpoint() {
    let (_dir, cfg) = setup();
    let run = train(&cfg);
    let ckpt = run.join("checkpoints/task_2");
    for suite in ["prop1", "stability", "grads"] {
        let out = mslora(&["verify", s(&ckpt), "--suite", suite]);
        assert_eq!(code(&out), 0, "{suite}: {}", stderr(&out));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v.is_object(), "{suite}");
    }
}

#[test]
fn verify_missing_target_is_an_error() {
    let (dir, _) = setup();
    let out = mslora(&["verify", s(&dir.path().join("absent"))]);
    assert_ne!(code(&out), 0);
}

#[test]
fn sweep_rejects_empty_values() {
    let (_dir, cfg) = setup();
    assert_eq!(
        code(&mslora(&[
            "sweep",
            s(&cfg),
            "--axis",
            "rank",
            "--values",
            ""
        ])),
        1
    );
}

#[test]
fn sweep_rejects_unknown_axis() {
    let (_dir, cfg) = setup();
    assert_eq!(
        code(&mslora(&[
            "sweep",
            s(&cfg),
            "--axis",
            "depth",
            "--values",
            "1"
        ])),
        1
    );
}

#[test]
fn sweep_writes_table() {
    let (dir, cfg) = setup();
    let out_dir = dir.path().join("sw");
    let out = mslora(&[
        "sweep",
        s(&cfg),
        "--axis",
        "weights",
        "--values",
        "0:0,0.1:0.01",
        "--parallel",
        "--output",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("sweep_weights.csv")).unwrap();
    assert!(csv.starts_with("axis,value,status"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn export_artifacts_and_collision() {
    let (dir, cfg) = setup();
    let run = train(&cfg);
    let ckpt = run.join("checkpoints/task_2");
    let sim = dir.path().join("sim.csv");
    let out = mslora(&["export", s(&ckpt), "--what", "sim", "--out", s(&sim)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&sim).unwrap();
    assert_eq!(text.lines().count(), 4);

    let again = mslora(&["export", s(&ckpt), "--what", "sim", "--out", s(&sim)]);
    assert_eq!(code(&again), 1);
    let forced = mslora(&[
        "export",
        s(&ckpt),
        "--what",
        "sim",
        "--out",
        s(&sim),
        "--force",
    ]);
    assert_eq!(code(&forced), 0);

    let delta = dir.path().join("delta.csv");
    assert_eq!(
        code(&mslora(&[
            "export",
            s(&ckpt),
            "--what",
            "delta",
            "--out",
            s(&delta)
        ])),
        0
    );
    let text = fs::read_to_string(&delta).unwrap();
    assert_eq!(text.lines().next().unwrap(), "layer,row,col,value");
    assert_eq!(text.lines().count(), 1 + 3 * 8 * 8);

    let emb = dir.path().join("emb.csv");
    let out = mslora(&["export", s(&ckpt), "--what", "embeddings", "--out", s(&emb)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let header = fs::read_to_string(&emb)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.ends_with("f7,task,modality,split"), "{header}");
}

#[test]
fn unknown_export_kind_exits_1() {
    let (dir, _) = setup();
    let out = mslora(&[
        "export",
        s(dir.path()),
        "--what",
        "weights",
        "--out",
        "x.csv",
    ]);
    assert_eq!(code(&out), 1);
}
