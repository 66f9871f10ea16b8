use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgnt_core::mesh::{FrameState, Mesh, NodeType};
use mgnt_core::trajectory::Trajectory;

const TINY: &str = r#"
seed = 5

[data]
n_train = 2
n_test = 1

[data.impact]
frames = 16

[model]
latent_dim = 8
n_tokens = 4
n_heads = 2
transformer_dims = [8, 4, 8]

[train]
steps = 6
batch_size = 2
lr_initial = 1e-3
lr_final = 1e-4
checkpoint_every = 3
"#;

fn mgnt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgnt"))
        .args(args)
        .env_remove("MGNT_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn with_data() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let o = mgnt(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    Run {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(run: &Run, out: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out = run.root.join(out);
    let mut args = vec!["train", "--config", s(&run.config), "--data", s(&run.data), "--out", s(&out)];
    args.extend_from_slice(extra);
    (mgnt(&args), out)
}

#[test]
fn gen_data_writes_files_and_configs() {
    let run = with_data();
    let names: Vec<String> = fs::read_dir(&run.data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for n in ["manifest.json", "config.toml", "resolved_config.toml", "train_000.mgnt", "train_001.mgnt", "test_000.mgnt"] {
        assert!(names.iter().any(|x| x == n), "missing {n} in {names:?}");
    }
    assert_eq!(fs::read_to_string(run.data.join("config.toml")).unwrap(), TINY);
    let resolved = fs::read_to_string(run.data.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 5"));

    let again = run.root.join("again");
    assert!(mgnt(&["gen-data", "--config", s(&run.config), "--out", s(&again)]).status.success());
    for n in ["train_000.mgnt", "train_001.mgnt", "test_000.mgnt", "manifest.json"] {
        assert_eq!(fs::read(run.data.join(n)).unwrap(), fs::read(again.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn seed_precedence() {
    let run = with_data();
    let env_out = run.root.join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_mgnt"))
        .args(["gen-data", "--config", s(&run.config), "--out", s(&env_out)])
        .env("MGNT_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(fs::read_to_string(env_out.join("resolved_config.toml")).unwrap().contains("seed = 77"));
    assert_ne!(fs::read(env_out.join("train_000.mgnt")).unwrap(), fs::read(run.data.join("train_000.mgnt")).unwrap());

    let flag_out = run.root.join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_mgnt"))
        .args(["gen-data", "--config", s(&run.config), "--out", s(&flag_out), "--seed", "5"])
        .env("MGNT_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(flag_out.join("train_000.mgnt")).unwrap(), fs::read(run.data.join("train_000.mgnt")).unwrap());
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = mgnt(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_resume_matches_uninterrupted() {
    let run = with_data();
    let (o, full) = train(&run, "full", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for n in ["checkpoint.mgnt", "model.mgnt", "loss.csv", "config.toml", "resolved_config.toml"] {
        assert!(full.join(n).exists(), "{n}");
    }
    let csv = fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("step,loss,lr,grad_norm"));

    let (o, part) = train(&run, "part", &["--stop-after", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!part.join("model.mgnt").exists());
    assert_eq!(fs::read_to_string(part.join("loss.csv")).unwrap().lines().count(), 4);
    let (o, _) = train(&run, "part", &["--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resuming at step 3"));
    for n in ["loss.csv", "checkpoint.mgnt", "model.mgnt"] {
        assert_eq!(fs::read(full.join(n)).unwrap(), fs::read(part.join(n)).unwrap(), "{n}");
    }

    let (o, again) = train(&run, "again", &[]);
    assert!(o.status.success());
    assert_eq!(fs::read(full.join("loss.csv")).unwrap(), fs::read(again.join("loss.csv")).unwrap());
}

#[test]
fn resume_without_checkpoint_is_a_config_error() {
    let run = with_data();
    let (o, _) = train(&run, "none", &["--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_3() {
    let run = with_data();
    let cfg = run.root.join("hot.toml");
    fs::write(&cfg, TINY.replace("lr_initial = 1e-3", "lr_initial = 1e200").replace("lr_final = 1e-4", "lr_final = 1e199")).unwrap();
    let out = run.root.join("hot");
    let o = mgnt(&["train", "--config", s(&cfg), "--data", s(&run.data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("training aborted at step"));
}

#[test]
fn eval_rollout_and_attention() {
    let run = with_data();
    let (o, trained) = train(&run, "trained", &[]);
    assert!(o.status.success());
    let ck = trained.join("model.mgnt");

    let ev = run.root.join("eval");
    let o = mgnt(&["eval", "--checkpoint", s(&ck), "--data", s(&run.data), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["n_trajectories", "horizon", "rmse_1", "rmse_all", "r_rmse", "consistency"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["horizon"], 15);
    assert!(ev.join("curves.csv").exists());

    let oracle = run.root.join("oracle");
    let o = mgnt(&["eval", "--predictor", "oracle", "--data", s(&run.data), "--out", s(&oracle)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(oracle.join("metrics.json")).unwrap()).unwrap();
    for key in ["rmse_1", "rmse_all"] {
        for g in r[key].as_array().unwrap() {
            assert_eq!(g["value"].as_f64(), Some(0.0), "{key} {}", g["name"]);
        }
    }

    let test_traj = run.data.join("test_000.mgnt");
    let ro = run.root.join("rollout");
    let o = mgnt(&[
        "rollout", "--checkpoint", s(&ck), "--trajectory", s(&test_traj), "--horizon", "8", "--attention", "--out", s(&ro),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let predicted = Trajectory::read(&ro.join("rollout.mgnt")).unwrap();
    assert_eq!(predicted.len(), 9);
    let csv = fs::read_to_string(ro.join("rollout_error.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,contact_edges,rmse_displacement,rmse_velocity,rmse_hardening");
    assert_eq!(csv.lines().count(), 9);
    assert!(ro.join("attention.mgnt").exists());

    // The predicted trajectory feeds back into eval.
    let re = run.root.join("re-eval");
    let o = mgnt(&["eval", "--checkpoint", s(&ck), "--trajectory", s(&ro.join("rollout.mgnt")), "--out", s(&re)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = mgnt(&["rollout", "--checkpoint", s(&ck), "--trajectory", s(&test_traj), "--horizon", "99", "--out", s(&ro)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max horizon 15"), "{}", stderr(&o));

    let at = run.root.join("attn");
    let o = mgnt(&[
        "export-attention", "--checkpoint", s(&ck), "--trajectory", s(&test_traj), "--frame", "10", "--block", "1", "--out", s(&at),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = mgnt_core::container::Container::read(at.join("attention_block1_frame0010.mgnt")).unwrap();
    let w = c.tensor("weights").unwrap();
    assert_eq!(w.cols(), 4);
    let o = mgnt(&[
        "export-attention", "--checkpoint", s(&ck), "--trajectory", s(&test_traj), "--block", "7", "--out", s(&at),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn schema_mismatches_exit_4() {
    let run = with_data();
    let (o, trained) = train(&run, "trained", &[]);
    assert!(o.status.success());
    let ck = trained.join("checkpoint.mgnt");

    // A trajectory file is not a checkpoint.
    let traj = run.data.join("test_000.mgnt");
    let o = mgnt(&["eval", "--checkpoint", s(&traj), "--data", s(&run.data), "--out", s(&run.root.join("x"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    // A 3D trajectory has wider features than the 2D model.
    let mesh = Mesh::new(
        3,
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![vec![0, 1, 2]],
        vec![NodeType::Deformable; 3],
        vec![0; 3],
    )
    .unwrap();
    let f = FrameState::at_rest(&mesh);
    let t3 = Trajectory {
        mesh,
        kappa: 0.2,
        dt: 0.01,
        frames: vec![f.clone(), f],
    };
    let p3 = run.root.join("three.mgnt");
    t3.write(&p3).unwrap();
    let o = mgnt(&["eval", "--checkpoint", s(&ck), "--trajectory", s(&p3), "--out", s(&run.root.join("y"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("schema mismatch"));
}

#[test]
fn verify_passes_and_sabotage_fails() {
    let o = mgnt(&["verify"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all 6 checks passed"));
    let o = mgnt(&["verify", "--sabotage"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("primitive gradients"));
}
