use std::fs;

use mslora::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, MANIFEST};
use mslora::model::{MaskPolicy, ParamId};
use mslora::optim::{Moments, OptimizerState};
use mslora::rng::SplitMix64;
use mslora::trainer::{default_sequence, run_fresh, RunConfig};
use mslora::{Error, Matrix};

fn trained() -> (mslora::model::ToyModel, mslora::trainer::RunOutcome) {
    let mut seq = default_sequence();
    for t in &mut seq {
        t.steps = 10;
    }
    run_fresh(&seq, &RunConfig::default(), None).unwrap()
}

#[test]
fn round_trip_is_bitwise() {
    let (model, out) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&path, &model, None, &out.snapshots).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.snapshots, out.snapshots);
    assert!(back.optimizer.is_none());
    let mut rng = SplitMix64::new(4);
    let x = Matrix::from_fn(16, 9, |_, _| rng.normal());
    for t in 0..model.tasks().len() {
        let a = model.logits(&x, t, MaskPolicy::Prefix).unwrap();
        let b = back.model.logits(&x, t, MaskPolicy::Prefix).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}

#[test]
fn optimizer_state_round_trips() {
    let mut model = RunConfig::default().build_model().unwrap();
    model
        .begin_task("t".into(), "m".into(), 3, None, 2, 1.0, 1)
        .unwrap();
    let mut state = OptimizerState::new();
    state.step = 17;
    let id = ParamId::BranchB {
        layer: 2,
        branch: 0,
    };
    let shape = model.param(id).shape();
    state.moments.insert(
        id,
        Moments {
            first: Matrix::filled(shape.0, shape.1, 0.25),
            second: Matrix::filled(shape.0, shape.1, 1e-9),
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&path, &model, Some(&state), &[]).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.optimizer, Some(state));
    assert_eq!(back.model, model);
}

#[test]
fn manifest_is_idempotent_and_overwrite_is_clean() {
    let (model, out) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&path, &model, None, &out.snapshots).unwrap();
    let first = fs::read_to_string(path.join(MANIFEST)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    save_checkpoint(&path, &back.model, None, &back.snapshots).unwrap();
    assert_eq!(fs::read_to_string(path.join(MANIFEST)).unwrap(), first);
    let m = read_manifest(&path).unwrap();
    assert_eq!(serde_json::to_string_pretty(&m).unwrap() + "\n", first);
    // No temp directories left behind.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn wrong_magic_is_a_format_error() {
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&path, &model, None, &[]).unwrap();
    let file = path.join("layer0_weight.bin");
    let mut bytes = fs::read(&file).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(&file, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn schema_version_mismatch_rejected() {
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&path, &model, None, &[]).unwrap();
    let mpath = path.join(MANIFEST);
    let text = fs::read_to_string(&mpath).unwrap();
    fs::write(
        &mpath,
        text.replace("\"schema_version\": 1", "\"schema_version\": 9"),
    )
    .unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("schema version"), "{err}");
}

#[test]
fn truncated_matrix_rejected() {
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck");
    save_checkpoint(&path, &model, None, &[]).unwrap();
    let file = path.join("head0_weight.bin");
    let bytes = fs::read(&file).unwrap();
    fs::write(&file, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}
