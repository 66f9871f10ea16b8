use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mgnt_core::config::{DataKind, RunConfig, SEED_ENV};
use mgnt_core::error::ConfigError;
use mgnt_core::graph::GraphBuilder;
use mgnt_core::metrics::{default_groups, evaluate, rmse_all, state_sequence, GroupStat, MetricsReport};
use mgnt_core::mesh::Mesh;
use mgnt_core::model::Model;
use mgnt_core::rollout::{
    export_attention as attention_map, rollout as run_rollout, BoundaryDriver, IdentityPredictor, ModelPredictor,
    ReplayPredictor,
};
use mgnt_core::synthetic::{gen_dataset, long_range_benchmark};
use mgnt_core::training::{fit_until, write_loss_csv, Checkpoint, TrainState, TrainingSet};
use mgnt_core::trajectory::{Manifest, Split, Trajectory};
use mgnt_core::verify::{run_suite, VerifyOptions};
use mgnt_core::{Error, Result};

use crate::{Common, PredictorKind};

pub const CHECKPOINT_FILE: &str = "checkpoint.mgnt";
pub const MODEL_FILE: &str = "model.mgnt";

/// Loads and resolves the run config, creates the output directory and
/// records both the verbatim and the resolved config there.
fn prepare(common: &Common) -> Result<RunConfig> {
    let (mut cfg, text) = RunConfig::load(common.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed(env.as_deref(), common.seed)?;
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(ConfigError::Invalid("--workers must be at least 1".into()).into());
        }
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = &common.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(t) = text {
        write_text(&out.join("config.toml"), &t)?;
    }
    write_text(&out.join("resolved_config.toml"), &cfg.to_toml())?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(common: &Common) -> Result<ExitCode> {
    let cfg = prepare(common)?;
    let t0 = Instant::now();
    let d = &cfg.data;
    let manifest = match d.kind {
        DataKind::Impact => gen_dataset(&common.out, d.n_train, d.n_test, &d.impact, cfg.seed, cfg.workers)?,
        DataKind::LongRange => long_range_benchmark(&common.out, d.n_train, d.n_test, &d.long_range, cfg.seed, cfg.workers)?,
    };
    println!(
        "wrote {} trajectories ({} kind) to {} in {:.1}s",
        manifest.trajectories.len(),
        manifest.kind,
        common.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, data: &Path, resume: bool, stop_after: Option<usize>) -> Result<ExitCode> {
    let cfg = prepare(common)?;
    let manifest = Manifest::read(data)?;
    let graph = cfg.graph.apply(manifest.graph);
    let trajectories = manifest.load(data, Split::Train)?;
    if trajectories.is_empty() {
        return Err(Error::Schema(format!("{} has no training trajectories", data.display())));
    }
    let tcfg = cfg.train_config();
    let ck_path = common.out.join(CHECKPOINT_FILE);
    let (set, state) = if resume {
        if !ck_path.exists() {
            return Err(ConfigError::Invalid(format!("--resume: no checkpoint at {}", ck_path.display())).into());
        }
        let ck = Checkpoint::read(&ck_path)?;
        if ck.train != tcfg || ck.graph != graph {
            return Err(ConfigError::Invalid(format!(
                "--resume: training or graph settings differ from {}",
                ck_path.display()
            ))
            .into());
        }
        let set = TrainingSet::with_normalizer(trajectories, &graph, ck.state.normalizer.clone())?;
        check_dims(&ck.state.model, &set.items[0].builder)?;
        println!("resuming at step {}", ck.state.step());
        (set, ck.state)
    } else {
        let set = TrainingSet::new(trajectories, &graph)?;
        let mcfg = cfg.model.to_config(set.items[0].builder.dims());
        let model = Model::new(mcfg, cfg.seed)?;
        println!("model parameters: {}", model.config().param_count());
        let normalizer = set.normalizer.clone();
        (set, TrainState::new(model, normalizer))
    };
    let stop = stop_after.unwrap_or(tcfg.steps).min(tcfg.steps);
    let every = tcfg.checkpoint_every.max(1);
    let report = (tcfg.steps / 20).max(1);
    let t0 = Instant::now();
    let save = |state: &TrainState| -> Result<()> {
        Checkpoint {
            state: state.clone(),
            graph,
            train: tcfg.clone(),
        }
        .write(&ck_path)?;
        write_loss_csv(&state.history, &common.out.join("loss.csv"))
    };
    let state = fit_until(&set, state, &tcfg, stop, |s| {
        let r = s.history.last().expect("a step was recorded");
        let done = r.step + 1;
        if done % report == 0 {
            eprintln!(
                "step {done:>6}  loss {:.4e}  lr {:.3e}  |g| {:.3e}  {:.0}s",
                r.loss,
                r.lr,
                r.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
        if done % every == 0 {
            save(s)?;
        }
        Ok(())
    });
    let state = match state {
        Ok(s) => s,
        Err(e) => {
            if let Error::TrainingAbort { step, .. } = &e {
                eprintln!("training aborted at step {step}; last good checkpoint: {}", ck_path.display());
            }
            return Err(e);
        }
    };
    save(&state)?;
    if state.step() == tcfg.steps {
        let p = ModelPredictor::new(state.model.clone(), state.normalizer.clone());
        let path = common.out.join(MODEL_FILE);
        p.to_container(&graph)?.write(&path).map_err(Error::from)?;
    }
    let tail = &state.history[state.history.len().saturating_sub(50)..];
    let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "trained {} steps in {:.1}s; mean loss over the last {} steps {:.4e}",
        state.step(),
        t0.elapsed().as_secs_f64(),
        tail.len(),
        mean
    );
    Ok(ExitCode::SUCCESS)
}

fn check_dims(model: &Model, builder: &GraphBuilder) -> Result<()> {
    let want = model.config().dims;
    let have = builder.dims();
    if want != have {
        return Err(Error::Schema(format!(
            "model expects feature widths {want:?}, data provides {have:?}"
        )));
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub common: &'a Common,
    pub checkpoint: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub split: Split,
    pub trajectories: &'a [PathBuf],
    pub horizon: Option<usize>,
    pub predictor: PredictorKind,
}

fn load_trajectories(paths: &[PathBuf]) -> Result<Vec<Trajectory>> {
    paths.iter().map(|p| Trajectory::read(p)).collect()
}

pub fn eval(a: &EvalArgs<'_>) -> Result<ExitCode> {
    let cfg = prepare(a.common)?;
    let (trajectories, data_graph) = match a.data {
        Some(dir) => {
            let m = Manifest::read(dir)?;
            (m.load(dir, a.split)?, cfg.graph.apply(m.graph))
        }
        None => (load_trajectories(a.trajectories)?, cfg.graph.apply(cfg.data.graph())),
    };
    if trajectories.is_empty() {
        return Err(Error::Schema("no trajectories to evaluate".into()));
    }
    let horizon = a.horizon.or(cfg.metrics.horizon);
    let t0 = Instant::now();
    let report = match a.predictor {
        PredictorKind::Model => {
            let path = a.checkpoint.expect("clap requires --checkpoint for the model predictor");
            let (p, graph) = ModelPredictor::read(path)?;
            for t in &trajectories {
                check_dims(&p.model, &GraphBuilder::new(t.mesh.clone(), t.kappa, &graph)?)?;
            }
            evaluate(&p, &trajectories, &graph, horizon, cfg.workers)?
        }
        PredictorKind::Oracle => {
            let p = ReplayPredictor::new(trajectories.clone());
            evaluate(&p, &trajectories, &data_graph, horizon, cfg.workers)?
        }
        PredictorKind::Identity => evaluate(&IdentityPredictor, &trajectories, &data_graph, horizon, cfg.workers)?,
    };
    report.write_json(&a.common.out.join("metrics.json"))?;
    write_text(&a.common.out.join("curves.csv"), &report.curves_csv())?;
    print_report(&report);
    println!("evaluated in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &MetricsReport) {
    println!("{} trajectories, horizon {}", r.n_trajectories, r.horizon);
    println!("{:<14}{:>14}{:>14}{:>12}", "variable", "RMSE-1", "RMSE-all", "R-RMSE %");
    let fmt = |s: &GroupStat| match s.std_error {
        Some(e) => format!("{:.3e}±{:.1e}", s.value, e),
        None => format!("{:.3e}", s.value),
    };
    for ((one, all), rel) in r.rmse_1.iter().zip(&r.rmse_all).zip(&r.r_rmse) {
        println!("{:<14}{:>14}{:>14}{:>12.3}", one.name, fmt(one), fmt(all), rel.value);
    }
    let viol: Vec<usize> = r.consistency.iter().map(|c| c.predicted_hardening.violations).collect();
    println!("hardening violations per trajectory: {viol:?}");
}

/// Per-step RMSE of each variable group and the contact edge count.
fn error_csv(mesh: &Mesh, predicted: &[mgnt_core::mesh::FrameState], truth: &[mgnt_core::mesh::FrameState], contacts: &[usize]) -> Result<String> {
    let groups = default_groups(mesh.dim());
    let rows: Vec<usize> = (0..mesh.n_nodes()).filter(|&i| mesh.is_deformable(i)).collect();
    let mut s = String::from("step,contact_edges");
    for g in &groups {
        s.push_str(&format!(",rmse_{}", g.name));
    }
    s.push('\n');
    let p = state_sequence(mesh, predicted);
    let t = state_sequence(mesh, truth);
    for k in 0..p.len() {
        s.push_str(&format!("{},{}", k + 1, contacts[k]));
        for g in rmse_all(&[vec![p[k].clone()]], &[vec![t[k].clone()]], std::slice::from_ref(&rows), &groups)? {
            s.push_str(&format!(",{:e}", g.value));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn rollout(common: &Common, checkpoint: &Path, trajectory: &Path, horizon: Option<usize>, attention: bool) -> Result<ExitCode> {
    let _cfg = prepare(common)?;
    let (p, graph) = ModelPredictor::read(checkpoint)?;
    let traj = Trajectory::read(trajectory)?;
    let builder = GraphBuilder::new(traj.mesh.clone(), traj.kappa, &graph)?;
    check_dims(&p.model, &builder)?;
    let horizon = horizon.unwrap_or(traj.len().saturating_sub(1));
    let frames = &traj.frames;
    let t0 = Instant::now();
    let r = run_rollout(&p, &builder, &frames[0], horizon, &BoundaryDriver::GroundTruth(frames), attention)?;
    let predicted = Trajectory {
        mesh: traj.mesh.clone(),
        kappa: traj.kappa,
        dt: traj.dt,
        frames: r.all_frames(),
    };
    predicted.write(&common.out.join("rollout.mgnt"))?;
    let csv = error_csv(&traj.mesh, &r.frames, &frames[1..=horizon], &r.contact_counts)?;
    write_text(&common.out.join("rollout_error.csv"), &csv)?;
    if let Some(steps) = &r.attention {
        let mut c = mgnt_core::container::Container::new();
        for (t, blocks) in steps.iter().enumerate() {
            for (b, w) in blocks.iter().enumerate() {
                c.push_tensor(&format!("step{:04}/block{b}", t + 1), w)?;
            }
        }
        c.meta = serde_json::json!({ "horizon": horizon, "blocks": p.model.config().n_transformer_blocks });
        c.write(common.out.join("attention.mgnt"))?;
    }
    println!("rolled out {horizon} steps in {:.1}s", t0.elapsed().as_secs_f64());
    if let Some(last) = csv.lines().last() {
        println!("final step error: {last}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn export_attention(common: &Common, checkpoint: &Path, trajectory: &Path, frame: usize, block: usize) -> Result<ExitCode> {
    let _cfg = prepare(common)?;
    let (p, graph) = ModelPredictor::read(checkpoint)?;
    let traj = Trajectory::read(trajectory)?;
    let f = traj.frames.get(frame).ok_or_else(|| {
        Error::Contract(format!("frame {frame} out of range (trajectory has {} frames)", traj.len()))
    })?;
    let builder = GraphBuilder::new(traj.mesh.clone(), traj.kappa, &graph)?;
    check_dims(&p.model, &builder)?;
    let map = attention_map(&p, &builder, f, block)?;
    let path = common.out.join(format!("attention_block{block}_frame{frame:04}.mgnt"));
    map.to_container()?.write(&path)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn verify(seed: u64, sabotage: bool) -> Result<ExitCode> {
    let checks = run_suite(VerifyOptions { seed, sabotage });
    println!("{:<28}{:<7}{:>9}  detail", "check", "result", "seconds");
    for c in &checks {
        println!(
            "{:<28}{:<7}{:>9.2}  {}",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.seconds,
            c.detail
        );
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}
