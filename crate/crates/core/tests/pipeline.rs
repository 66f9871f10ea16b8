use mgnt_core::metrics::evaluate;
use mgnt_core::model::{Model, TargetMode};
use mgnt_core::rollout::{rollout, BoundaryDriver, IdentityPredictor, ModelPredictor};
use mgnt_core::synthetic::{gen_dataset, long_range_benchmark, LongRangeConfig, OracleConfig};
use mgnt_core::training::{fit, fit_until, Checkpoint, TrainConfig, TrainState, TrainingSet};
use mgnt_core::trajectory::{Manifest, Split, Trajectory};
use mgnt_core::verify::tiny_config;

fn small() -> OracleConfig {
    OracleConfig {
        frames: 10,
        ..Default::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 2,
        lr_initial: 1e-3,
        lr_final: 1e-4,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn dataset_train_checkpoint_eval() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(dir.path(), 2, 1, &small(), 11, 1).unwrap();
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    let train = m.load(dir.path(), Split::Train).unwrap();
    let test = m.load(dir.path(), Split::Test).unwrap();
    assert!(train.iter().chain(&test).all(|t| (0.1..0.3).contains(&t.kappa)));

    let set = TrainingSet::new(train, &m.graph).unwrap();
    let model = Model::new(tiny_config(set.items[0].builder.dims(), 8), 1).unwrap();
    let tc = quick_train();
    let st = fit(&set, TrainState::new(model, set.normalizer.clone()), &tc, |_| Ok(())).unwrap();
    assert_eq!(st.history.len(), 6);
    assert!(st.history.iter().all(|r| r.loss.is_finite()));

    let path = dir.path().join("ck.mgnt");
    Checkpoint {
        state: st.clone(),
        graph: m.graph.clone(),
        train: tc,
    }
    .write(&path)
    .unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back.state.model.params(), st.model.params());
    assert_eq!(back.state.history, st.history);

    let p = ModelPredictor::new(back.state.model, back.state.normalizer);
    let r = evaluate(&p, &test, &m.graph, None, 1).unwrap();
    assert_eq!(r.horizon, 9);
    assert_eq!(r.n_trajectories, 1);
    assert!(r.rmse_all.iter().all(|g| g.value.is_finite()));
    assert_eq!(r.consistency[0].ground_truth_hardening.violations, 0);
}

#[test]
fn interrupted_training_resumes_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(dir.path(), 2, 1, &small(), 4, 1).unwrap();
    let set = TrainingSet::new(m.load(dir.path(), Split::Train).unwrap(), &m.graph).unwrap();
    let fresh = || TrainState::new(Model::new(tiny_config(set.items[0].builder.dims(), 8), 2).unwrap(), set.normalizer.clone());
    let tc = quick_train();
    let whole = fit(&set, fresh(), &tc, |_| Ok(())).unwrap();

    let half = fit_until(&set, fresh(), &tc, 3, |_| Ok(())).unwrap();
    let path = dir.path().join("half.mgnt");
    Checkpoint {
        state: half,
        graph: m.graph.clone(),
        train: tc.clone(),
    }
    .write(&path)
    .unwrap();
    let resumed = fit(&set, Checkpoint::read(&path).unwrap().state, &tc, |_| Ok(())).unwrap();
    assert_eq!(resumed.history, whole.history);
    assert_eq!(resumed.model.params(), whole.model.params());
}

#[test]
fn identity_rollout_keeps_the_body_still() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(dir.path(), 1, 1, &small(), 5, 1).unwrap();
    let t: Trajectory = m.load(dir.path(), Split::Test).unwrap().remove(0);
    let set = TrainingSet::new(vec![t.clone()], &m.graph).unwrap();
    let r = rollout(&IdentityPredictor, &set.items[0].builder, &t.frames[0], 9, &BoundaryDriver::GroundTruth(&t.frames), false).unwrap();
    assert!(r.frames.iter().all(|f| f.positions == t.frames[0].positions));
    assert!(rollout(&IdentityPredictor, &set.items[0].builder, &t.frames[0], 10, &BoundaryDriver::GroundTruth(&t.frames), false).is_err());
}

#[test]
fn delta_mode_trains_too() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(dir.path(), 1, 1, &small(), 6, 1).unwrap();
    let set = TrainingSet::new(m.load(dir.path(), Split::Train).unwrap(), &m.graph).unwrap();
    let mut cfg = tiny_config(set.items[0].builder.dims(), 8);
    cfg.target_mode = TargetMode::Delta;
    let st = fit(&set, TrainState::new(Model::new(cfg, 0).unwrap(), set.normalizer.clone()), &quick_train(), |_| Ok(())).unwrap();
    assert!(st.history.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn long_range_dataset_is_a_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LongRangeConfig {
        n_nodes: 120,
        frames: 4,
        ..Default::default()
    };
    let m = long_range_benchmark(dir.path(), 1, 1, &cfg, 2, 1).unwrap();
    assert_eq!(m.kind, "long_range");
    let t = m.load(dir.path(), Split::Train).unwrap().remove(0);
    assert_eq!(t.mesh.n_nodes(), 120);
    assert_eq!(t.mesh.elements().len(), 119);
    // The far end moves between frames because the drive changed.
    let far = 2 * 119;
    assert_ne!(t.frames[2].positions[far], t.frames[3].positions[far]);
}
