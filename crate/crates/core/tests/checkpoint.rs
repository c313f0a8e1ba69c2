use std::fs;
use std::sync::Arc;

use fbsde_sampler::engine::{train, RolloutConfig, TrainOptions};
use fbsde_sampler::sampler::{sample, CheckpointError, ModelCheckpoint, FORMAT_VERSION, TOOL_VERSION};
use fbsde_sampler::schedule::{BetaSchedule, TimeGrid};
use fbsde_sampler::targets::{MixtureTarget, Target};

fn trained() -> ModelCheckpoint {
    let target = MixtureTarget::nine_mode();
    let cfg = RolloutConfig::new(
        TimeGrid::with_steps(3.0, 30),
        16,
        BetaSchedule::piecewise_linear(vec![(0.0, 0.8), (3.0, 1.2)], 3.0),
        Arc::new(target.clone()),
    )
    .unwrap();
    let out = train(&cfg, &TrainOptions { iterations: 5, lr: 1e-2, seed: 21 }, None, |_, _| {}).unwrap();
    ModelCheckpoint {
        format_version: FORMAT_VERSION,
        tool_version: TOOL_VERSION.into(),
        theta_y: out.theta_y,
        theta_z: out.theta_z,
        schedule: cfg.schedule.clone(),
        grid: cfg.grid,
        target: target.descriptor(),
        seed: 21,
        iterations: 5,
        final_loss: out.losses.last().copied(),
        lr: 1e-2,
        batch: 16,
    }
}

#[test]
fn save_load_is_bit_identical_and_sampling_matches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let ckpt = trained();
    ckpt.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let a = sample(&ckpt, ckpt.build_target().unwrap(), 300, 7).unwrap();
    let b = sample(&back, back.build_target().unwrap(), 300, 7).unwrap();
    assert_eq!(a, b);
    // saving the reloaded checkpoint reproduces the file byte for byte
    let again = dir.path().join("again.json");
    back.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn truncated_file_fails_to_parse() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let text = trained().to_json();
    fs::write(&path, &text[..text.len() - 40]).unwrap();
    assert!(matches!(ModelCheckpoint::load(&path), Err(CheckpointError::Parse { .. })));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ModelCheckpoint::load(&dir.path().join("nope.json")), Err(CheckpointError::Io { .. })));
}

#[test]
fn declared_shape_mismatch_names_the_layer() {
    let mut ckpt = trained();
    ckpt.theta_z.layers[2].inputs = 10;
    let err = ModelCheckpoint::from_json(&ckpt.to_json()).unwrap_err();
    assert!(err.to_string().contains("theta_z layer 2"), "{err}");
}

#[test]
fn missing_field_is_named() {
    let text = trained().to_json().replace("\"batch\": 16", "\"batches\": 16");
    let err = ModelCheckpoint::from_json(&text).unwrap_err();
    assert!(err.to_string().contains("batches"), "{err}");
}
