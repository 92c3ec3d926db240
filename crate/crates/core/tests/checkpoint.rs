mod common;

use clicker_core::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use clicker_core::head::{LossWeights, Stage};
use clicker_core::optim::{AdamState, OptimConfig};
use clicker_core::tensor::{Graph, ParamStore, Tensor};
use clicker_core::trainer::{run_stage2, RunOptions};
use clicker_core::Error;
use common::{config, corpus, fresh};

fn trained() -> Checkpoint {
    let c = corpus();
    run_stage2(
        fresh(&c),
        &config(Stage::Differentiate, 3, LossWeights::default()),
        &c.parallel.pairs(),
        &[],
        &RunOptions::default(),
    )
    .unwrap()
    .checkpoint
}

#[test]
fn save_load_save_is_byte_identical() {
    let cp = trained();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    cp.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.stage, Some(Stage::Differentiate));
    assert_eq!(loaded.optimizer, cp.optimizer);
    assert_eq!(loaded.model.vocab, cp.model.vocab);
}

#[test]
fn truncated_files_fail_cleanly() {
    let bytes = trained().to_bytes();
    for cut in [0, 3, 10, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn version_and_magic_are_checked() {
    let mut bytes = trained().to_bytes();
    bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
}

#[test]
fn load_errors_name_the_file() {
    let err = Checkpoint::load(std::path::Path::new("/nonexistent/model.ckpt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.ckpt");
    std::fs::write(&p, b"CLKPjunk").unwrap();
    let err = Checkpoint::load(&p).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }));
    assert!(err.to_string().contains("junk.ckpt"));
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap(), true);
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let z = g.scale(w, 0.0).unwrap();
    let loss = g.sum(z).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    let cfg = OptimConfig {
        weight_decay: 0.0,
        warmup_steps: 0,
        total_steps: 10,
        ..OptimConfig::default()
    };
    let mut state = AdamState::new(&store);
    for _ in 0..5 {
        state.step(&mut store, &cfg).unwrap();
    }
    assert_eq!(store.get(id).data(), &[0.5, -2.0, 3.0]);
}

#[test]
fn decay_shrinks_only_flagged_parameters() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0]).unwrap(), true);
    let b = store.add("b", Tensor::vector(vec![1.0]).unwrap(), false);
    let cfg = OptimConfig {
        lr: 0.1,
        weight_decay: 0.5,
        warmup_steps: 0,
        total_steps: 100,
        ..OptimConfig::default()
    };
    let mut state = AdamState::new(&store);
    state.step(&mut store, &cfg).unwrap();
    assert!((store.get(a).data()[0] - (1.0 - 0.1 * 0.99 * 0.5)).abs() < 1e-15);
    assert_eq!(store.get(b).data()[0], 1.0);
}

#[test]
fn quadratic_reaches_its_minimum_within_200_steps() {
    // f(x) = (x - 1)^2 has its minimum at x = 1.
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::vector(vec![0.0]).unwrap(), false);
    let cfg = OptimConfig {
        lr: 0.01,
        weight_decay: 0.0,
        warmup_steps: 0,
        total_steps: 1_000_000,
        ..OptimConfig::default()
    };
    let mut state = AdamState::new(&store);
    for _ in 0..200 {
        store.zero_grad();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let d = g.add_scalar(x, -1.0).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        state.step(&mut store, &cfg).unwrap();
    }
    let x = store.get(id).data()[0];
    assert!((x - 1.0).abs() < 0.02, "x = {x}");
}
