//! Teacher-forced one-step training.

use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container::Container;
use crate::error::{ConfigError, Error};
use crate::graph::{GraphBuilder, GraphConfig, GraphSample};
use crate::mesh::{FrameState, Mesh};
use crate::model::{Model, ModelConfig};
use crate::normalize::{frame_from_state, state_matrix, Normalizer, OutputHead, Stats};
use crate::tensor::Tensor;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMask {
    /// Only deformable nodes contribute.
    Deformable,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Multiple of the per-feature training std.
    pub noise_scale: f64,
    pub seed: u64,
    pub loss_mask: LossMask,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            lr_initial: 1e-4,
            lr_final: 1e-6,
            noise_scale: 0.003,
            seed: 0,
            loss_mask: LossMask::Deformable,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0 && self.lr_initial.is_finite() && self.lr_final.is_finite()) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    /// Exponential decay from `lr_initial` at step 0 to `lr_final` at the
    /// last step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr_initial;
        }
        let frac = step.min(self.steps - 1) as f64 / (self.steps - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(frac)
    }
}

/// Mean over samples of the per-sample mean over masked nodes of the squared
/// residual norm.
pub fn compute_loss(preds: &[Tensor], targets: &[Tensor], masks: &[Vec<bool>]) -> Result<f64, Error> {
    if preds.len() != targets.len() || preds.len() != masks.len() || preds.is_empty() {
        return Err(Error::Contract("loss needs one target and mask per prediction".into()));
    }
    let mut total = 0.0;
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        if p.shape() != t.shape() || m.len() != p.rows() {
            return Err(Error::Contract(format!(
                "prediction {:?}, target {:?} and mask of length {} disagree",
                p.shape(),
                t.shape(),
                m.len()
            )));
        }
        let rows: Vec<usize> = (0..m.len()).filter(|&i| m[i]).collect();
        if rows.is_empty() {
            return Err(ConfigError::Invalid("loss mask selects no nodes".into()).into());
        }
        let s: f64 = rows
            .iter()
            .map(|&i| p.row(i).iter().zip(t.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        total += s / rows.len() as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Differentiable per-sample loss; `target` holds only the masked rows.
pub fn sample_loss<'t>(pred: Var<'t>, target: &Tensor, rows: &[usize]) -> Result<Var<'t>, Error> {
    let r = pred.gather(rows)?.sub(pred.tape().constant(target.clone()))?;
    Ok(r.mul(r)?.sum_all().scale(1.0 / rows.len() as f64))
}

/// One trajectory prepared for batching.
#[derive(Debug, Clone)]
pub struct TrainingTrajectory {
    pub builder: GraphBuilder,
    pub trajectory: Trajectory,
    states: Vec<Tensor>,
}

impl TrainingTrajectory {
    pub fn new(trajectory: Trajectory, graph: &GraphConfig) -> Result<Self, Error> {
        let builder = GraphBuilder::new(trajectory.mesh.clone(), trajectory.kappa, graph)?;
        let states = trajectory.frames.iter().map(|f| state_matrix(&trajectory.mesh, f)).collect();
        Ok(Self {
            builder,
            trajectory,
            states,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.trajectory.mesh
    }

    pub fn state(&self, t: usize) -> &Tensor {
        &self.states[t]
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<TrainingTrajectory>,
    pub normalizer: Normalizer,
}

impl TrainingSet {
    /// Fits the normalizer on `trajectories`.
    pub fn new(trajectories: Vec<Trajectory>, graph: &GraphConfig) -> Result<Self, Error> {
        if trajectories.is_empty() {
            return Err(ConfigError::Invalid("training needs at least one trajectory".into()).into());
        }
        let items = trajectories
            .into_iter()
            .map(|t| TrainingTrajectory::new(t, graph))
            .collect::<Result<Vec<_>, _>>()?;
        let normalizer = Normalizer::fit(items.iter().map(|i| (&i.builder, &i.trajectory)));
        Ok(Self { items, normalizer })
    }

    pub fn with_normalizer(trajectories: Vec<Trajectory>, graph: &GraphConfig, normalizer: Normalizer) -> Result<Self, Error> {
        let items = trajectories
            .into_iter()
            .map(|t| TrainingTrajectory::new(t, graph))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { items, normalizer })
    }
}

/// Adds zero-mean Gaussian noise to deformable positions and velocities with
/// std `scale` times the node-feature std of the displacement and velocity
/// columns.
pub fn inject_input_noise<R: Rng + ?Sized>(
    frame: &FrameState,
    mesh: &Mesh,
    node_stats: &Stats,
    scale: f64,
    rng: &mut R,
) -> FrameState {
    let mut out = frame.clone();
    if scale == 0.0 {
        return out;
    }
    let d = mesh.dim();
    for i in (0..mesh.n_nodes()).filter(|&i| mesh.is_deformable(i)) {
        for a in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            out.positions[i * d + a] += scale * node_stats.std[a] * e;
            let e: f64 = rng.sample(StandardNormal);
            out.velocities[i * d + a] += scale * node_stats.std[d + a] * e;
        }
    }
    out
}

/// Normalized input graph with its normalized target.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub sample: GraphSample,
    /// Full `N×output` normalized target.
    pub target: Tensor,
    /// Rows entering the loss.
    pub rows: Vec<usize>,
    pub alpha_offset: Tensor,
}

impl BatchItem {
    pub fn masked_target(&self) -> Tensor {
        self.target.gather_rows(&self.rows)
    }
}

/// Builds one sample per `(trajectory, step)` pick: inputs from frame `t`,
/// targets from frame `t + 1`. All picks must name the same trajectory.
pub fn make_batch<R: Rng + ?Sized>(
    set: &TrainingSet,
    head: &OutputHead,
    picks: &[(usize, usize)],
    mask: LossMask,
    mut noise: Option<(f64, &mut R)>,
) -> Result<Vec<BatchItem>, Error> {
    let Some(&(traj, _)) = picks.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    if picks.iter().any(|&(k, _)| k != traj) {
        return Err(Error::Contract("batch samples must come from a single trajectory".into()));
    }
    let item = set
        .items
        .get(traj)
        .ok_or_else(|| Error::Contract(format!("trajectory index {traj} out of range ({} loaded)", set.items.len())))?;
    let len = item.trajectory.len();
    let mesh = item.mesh();
    let rows: Vec<usize> = match mask {
        LossMask::Deformable => (0..mesh.n_nodes()).filter(|&i| mesh.is_deformable(i)).collect(),
        LossMask::All => (0..mesh.n_nodes()).collect(),
    };
    let mut out = Vec::with_capacity(picks.len());
    for &(_, t) in picks {
        if t + 1 >= len {
            return Err(Error::Contract(format!(
                "step index {t} has no successor (trajectory length {len}, last valid index {})",
                len.saturating_sub(2)
            )));
        }
        let frame = match noise.as_mut() {
            Some((scale, rng)) => inject_input_noise(&item.trajectory.frames[t], mesh, &set.normalizer.node, *scale, *rng),
            None => item.trajectory.frames[t].clone(),
        };
        let current = state_matrix(mesh, &frame);
        let sample = set.normalizer.normalize_sample(&item.builder.build(&frame));
        out.push(BatchItem {
            sample,
            target: head.normalized_target(&current, item.state(t + 1)),
            rows: rows.clone(),
            alpha_offset: head.alpha_offset(&current),
        });
    }
    Ok(out)
}

/// Mean batch loss and its parameter gradients, accumulated in batch order.
pub fn loss_and_gradients<R: Rng + ?Sized>(
    model: &Model,
    head: &OutputHead,
    batch: &[BatchItem],
    mut gumbel: Option<&mut R>,
) -> Result<(f64, Vec<Tensor>), Error> {
    let params = model.params();
    let mut grads: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for item in batch {
        let tape = Tape::new();
        let p = params.on_tape(&tape, true);
        let out = model.forward(&p, &item.sample, gumbel.as_deref_mut())?;
        let pred = head.normalized_prediction(out.output, &item.alpha_offset)?;
        let l = sample_loss(pred, &item.masked_target(), &item.rows)?;
        loss += l.scalar() * inv;
        let g = tape.backward(l);
        for (acc, v) in grads.iter_mut().zip(&p) {
            if let Some(gv) = g.get(*v) {
                acc.add_assign(&gv.scale(inv));
            }
        }
    }
    Ok((loss, grads))
}

/// Deterministic mean one-step loss over every transition of every
/// trajectory in `set`.
pub fn evaluate_loss(model: &Model, set: &TrainingSet) -> Result<f64, Error> {
    let cfg = model.config();
    let head = OutputHead::new(&set.normalizer, cfg.target_mode, cfg.monotone_hardening);
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, item) in set.items.iter().enumerate() {
        for t in 0..item.trajectory.len().saturating_sub(1) {
            let batch = make_batch::<ChaCha8Rng>(set, &head, &[(k, t)], LossMask::Deformable, None)?;
            let b = &batch[0];
            let (o, _) = model.predict(&b.sample)?;
            let tape = Tape::new();
            let pred = head.normalized_prediction(tape.constant(o), &b.alpha_offset)?.value();
            let mut mask = vec![false; pred.rows()];
            b.rows.iter().for_each(|&i| mask[i] = true);
            total += compute_loss(&[pred], &[b.target.clone()], &[mask])?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("no transitions to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub normalizer: Normalizer,
    pub adam: Adam,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(model: Model, normalizer: Normalizer) -> Self {
        let adam = Adam::new(model.params().values());
        Self {
            model,
            normalizer,
            adam,
            history: Vec::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }
}

/// Stream 0 of the seed is left to parameter initialization.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Runs optimizer steps until `cfg.steps` have been taken in total.
/// `on_step` sees the state after every step. Each step draws its batch and
/// noise from a stream keyed by the step index, so resuming from a saved
/// state reproduces an uninterrupted run bit for bit.
pub fn fit(
    set: &TrainingSet,
    state: TrainState,
    cfg: &TrainConfig,
    on_step: impl FnMut(&TrainState) -> Result<(), Error>,
) -> Result<TrainState, Error> {
    fit_until(set, state, cfg, cfg.steps, on_step)
}

/// As [`fit`], stopping once `stop` total steps are done. The schedule still
/// follows `cfg.steps`.
pub fn fit_until(
    set: &TrainingSet,
    mut state: TrainState,
    cfg: &TrainConfig,
    stop: usize,
    mut on_step: impl FnMut(&TrainState) -> Result<(), Error>,
) -> Result<TrainState, Error> {
    cfg.validate()?;
    if set.items.is_empty() {
        return Err(ConfigError::Invalid("training needs at least one trajectory".into()).into());
    }
    let mcfg = state.model.config().clone();
    let head = OutputHead::new(&state.normalizer, mcfg.target_mode, mcfg.monotone_hardening);
    while state.step() < cfg.steps.min(stop) {
        let step = state.step();
        let lr = cfg.learning_rate(step);
        let mut rng = step_rng(cfg.seed, step);
        let traj = rng.random_range(0..set.items.len());
        let transitions = set.items[traj].trajectory.len().saturating_sub(1);
        if transitions == 0 {
            return Err(Error::Contract(format!("trajectory {traj} has fewer than two frames")));
        }
        let picks: Vec<(usize, usize)> = sample_indices(&mut rng, transitions, cfg.batch_size.min(transitions))
            .into_iter()
            .map(|t| (traj, t))
            .collect();
        let batch = make_batch(set, &head, &picks, cfg.loss_mask, Some((cfg.noise_scale, &mut rng)))?;
        let (loss, grads) = loss_and_gradients(&state.model, &head, &batch, Some(&mut rng))?;
        let grad_norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingAbort {
                step,
                reason: format!("non-finite {}", if loss.is_finite() { "gradient" } else { "loss" }),
                lr,
                grad_norm,
            });
        }
        state.adam.step(state.model.params_mut().values_mut(), &grads, lr);
        state.history.push(LossRecord {
            step,
            loss,
            lr,
            grad_norm,
        });
        on_step(&state)?;
    }
    Ok(state)
}

pub const CHECKPOINT_FORMAT: &str = "mgnt-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    version: u32,
    step: usize,
    adam_t: u64,
    model: ModelConfig,
    graph: GraphConfig,
    train: TrainConfig,
}

/// A saved training state together with the configs that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub graph: GraphConfig,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container, Error> {
        let mut c = Container::new();
        let s = &self.state;
        s.model.write_arrays(&mut c)?;
        for (name, (m, v)) in s.model.params().names().iter().zip(s.adam.m.iter().zip(&s.adam.v)) {
            c.push_tensor(&format!("adam_m/{name}"), m)?;
            c.push_tensor(&format!("adam_v/{name}"), v)?;
        }
        s.normalizer.write_arrays(&mut c)?;
        let hist: Vec<f64> = s
            .history
            .iter()
            .flat_map(|r| [r.step as f64, r.loss, r.lr, r.grad_norm])
            .collect();
        c.push_f64("history", &[s.history.len(), 4], hist)?;
        c.meta = serde_json::to_value(CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            step: s.step(),
            adam_t: s.adam.t,
            model: s.model.config().clone(),
            graph: self.graph.clone(),
            train: self.train.clone(),
        })?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, Error> {
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Schema(format!("checkpoint metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("expected a {CHECKPOINT_FORMAT} file, found `{}`", meta.format)));
        }
        let model = Model::from_container(meta.model, c)?;
        let mut adam = Adam::new(model.params().values());
        adam.t = meta.adam_t;
        for (i, name) in model.params().names().iter().enumerate() {
            adam.m[i] = c.tensor(&format!("adam_m/{name}"))?;
            adam.v[i] = c.tensor(&format!("adam_v/{name}"))?;
        }
        let normalizer = Normalizer::from_container(c)?;
        let (shape, h) = c.f64("history")?;
        if shape.len() != 2 || shape[1] != 4 || shape[0] != meta.step {
            return Err(Error::Schema(format!("history shape {shape:?} does not match step {}", meta.step)));
        }
        let history = h
            .chunks(4)
            .map(|r| LossRecord {
                step: r[0] as usize,
                loss: r[1],
                lr: r[2],
                grad_norm: r[3],
            })
            .collect();
        Ok(Self {
            state: TrainState {
                model,
                normalizer,
                adam,
                history,
            },
            graph: meta.graph,
            train: meta.train,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        self.to_container()?.write(path).map_err(|e| io_or(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        Self::from_container(&Container::read(path).map_err(|e| io_or(path, e))?)
    }
}

fn io_or(path: &Path, e: crate::error::ContainerError) -> Error {
    match e {
        crate::error::ContainerError::Io(source) => Error::io(path, source),
        other => other.into(),
    }
}

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<(), Error> {
    let mut s = String::from("step,loss,lr,grad_norm\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.loss, r.lr, r.grad_norm));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Decodes a raw network output into the next frame.
pub fn decode_frame(head: &OutputHead, mesh: &Mesh, output: &Tensor, current: &FrameState) -> Result<FrameState, Error> {
    let y = head.decode(output, &state_matrix(mesh, current))?;
    Ok(frame_from_state(mesh, &y))
}
