//! Autoregressive rollout and attention export.

use std::path::Path;

use crate::container::Container;
use crate::error::{ContainerError, Error};
use crate::graph::{GraphBuilder, GraphConfig};
use crate::mesh::{FrameState, Mesh};
use crate::model::{BlockTrace, Model, ModelConfig};
use crate::normalize::{Normalizer, OutputHead};
use crate::tensor::Tensor;
use crate::training::{decode_frame, Checkpoint, CHECKPOINT_FORMAT};
use crate::trajectory::Trajectory;

pub const MODEL_FORMAT: &str = "mgnt-model";

/// Anything that maps the current frame to a predicted next frame.
pub trait StepPredictor: Sync {
    fn step(&self, builder: &GraphBuilder, frame: &FrameState) -> Result<(FrameState, Vec<BlockTrace>), Error>;
}

/// A trained network with its normalization.
#[derive(Debug, Clone)]
pub struct ModelPredictor {
    pub model: Model,
    pub normalizer: Normalizer,
    head: OutputHead,
}

impl ModelPredictor {
    pub fn new(model: Model, normalizer: Normalizer) -> Self {
        let c = model.config();
        let head = OutputHead::new(&normalizer, c.target_mode, c.monotone_hardening);
        Self {
            model,
            normalizer,
            head,
        }
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    /// Parameters, normalization and configs without optimizer state.
    pub fn to_container(&self, graph: &GraphConfig) -> Result<Container, Error> {
        let mut c = Container::new();
        self.model.write_arrays(&mut c)?;
        self.normalizer.write_arrays(&mut c)?;
        c.meta = serde_json::json!({
            "format": MODEL_FORMAT,
            "version": 1,
            "model": self.model.config(),
            "graph": graph,
        });
        Ok(c)
    }

    /// Reads a model file or a training checkpoint.
    pub fn read(path: &Path) -> Result<(Self, GraphConfig), Error> {
        let c = Container::read(path).map_err(|e| match e {
            ContainerError::Io(source) => Error::io(path, source),
            other => other.into(),
        })?;
        match c.meta.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {
                let ck = Checkpoint::from_container(&c)?;
                Ok((Self::new(ck.state.model, ck.state.normalizer), ck.graph))
            }
            Some(MODEL_FORMAT) => {
                #[derive(serde::Deserialize)]
                struct Meta {
                    model: ModelConfig,
                    graph: GraphConfig,
                }
                let m: Meta = serde_json::from_value(c.meta.clone())
                    .map_err(|e| Error::Schema(format!("{}: model metadata: {e}", path.display())))?;
                let model = Model::from_container(m.model, &c)?;
                Ok((Self::new(model, Normalizer::from_container(&c)?), m.graph))
            }
            other => Err(Error::Schema(format!(
                "{} is neither a model nor a checkpoint (format {other:?})",
                path.display()
            ))),
        }
    }
}

impl StepPredictor for ModelPredictor {
    fn step(&self, builder: &GraphBuilder, frame: &FrameState) -> Result<(FrameState, Vec<BlockTrace>), Error> {
        let sample = self.normalizer.normalize_sample(&builder.build(frame));
        let (out, traces) = self.model.predict(&sample)?;
        Ok((decode_frame(&self.head, builder.mesh(), &out, frame)?, traces))
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPredictor;

impl StepPredictor for IdentityPredictor {
    fn step(&self, _: &GraphBuilder, frame: &FrameState) -> Result<(FrameState, Vec<BlockTrace>), Error> {
        Ok((frame.clone(), Vec::new()))
    }
}

/// Replays stored trajectories: a state equal to a stored frame of a
/// trajectory with the builder's `kappa` maps to the frame after it. Stands
/// in for a perfect model.
#[derive(Debug, Clone)]
pub struct ReplayPredictor {
    trajectories: Vec<Trajectory>,
}

impl ReplayPredictor {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }
}

impl StepPredictor for ReplayPredictor {
    fn step(&self, builder: &GraphBuilder, frame: &FrameState) -> Result<(FrameState, Vec<BlockTrace>), Error> {
        self.trajectories
            .iter()
            .filter(|t| t.kappa == builder.kappa())
            .find_map(|t| {
                let k = t.frames.iter().position(|f| f == frame)?;
                t.frames.get(k + 1).cloned()
            })
            .map(|f| (f, Vec::new()))
            .ok_or_else(|| Error::Contract("replay: state has no stored successor".into()))
    }
}

/// Prescribed kinematics for non-deformable nodes.
pub enum BoundaryDriver<'a> {
    /// Copy from stored frames; step `t` reads `frames[t]`.
    GroundTruth(&'a [FrameState]),
    /// Hold the initial state.
    Frozen,
    /// Arbitrary motion: `(step, mesh, frame)` writes the boundary nodes.
    Scripted(Box<dyn Fn(usize, &Mesh, &mut FrameState) + 'a>),
}

impl BoundaryDriver<'_> {
    fn max_horizon(&self) -> Option<usize> {
        match self {
            BoundaryDriver::GroundTruth(f) => Some(f.len().saturating_sub(1)),
            _ => None,
        }
    }

    fn apply(&self, step: usize, mesh: &Mesh, initial: &FrameState, frame: &mut FrameState) {
        let src = match self {
            BoundaryDriver::GroundTruth(frames) => &frames[step],
            BoundaryDriver::Frozen => initial,
            BoundaryDriver::Scripted(f) => return f(step, mesh, frame),
        };
        copy_boundary(mesh, src, frame);
    }
}

fn copy_boundary(mesh: &Mesh, src: &FrameState, dst: &mut FrameState) {
    let d = mesh.dim();
    for i in (0..mesh.n_nodes()).filter(|&i| !mesh.is_deformable(i)) {
        dst.positions[i * d..(i + 1) * d].copy_from_slice(&src.positions[i * d..(i + 1) * d]);
        dst.velocities[i * d..(i + 1) * d].copy_from_slice(&src.velocities[i * d..(i + 1) * d]);
        dst.hardening[i] = src.hardening[i];
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub initial: FrameState,
    /// Predicted frames `1..=horizon`.
    pub frames: Vec<FrameState>,
    /// Contact edges in the input graph of each step.
    pub contact_counts: Vec<usize>,
    /// Slice weights per step and block, when requested.
    pub attention: Option<Vec<Vec<Tensor>>>,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.frames.len()
    }

    /// Initial frame followed by the predictions.
    pub fn all_frames(&self) -> Vec<FrameState> {
        std::iter::once(self.initial.clone()).chain(self.frames.iter().cloned()).collect()
    }
}

/// Rolls `predictor` forward `horizon` steps from `initial`. Contact edges are
/// rebuilt from the predicted positions at every step.
pub fn rollout(
    predictor: &dyn StepPredictor,
    builder: &GraphBuilder,
    initial: &FrameState,
    horizon: usize,
    driver: &BoundaryDriver<'_>,
    keep_attention: bool,
) -> Result<RolloutResult, Error> {
    if horizon == 0 {
        return Err(Error::Contract("rollout horizon must be at least 1".into()));
    }
    if let Some(max) = driver.max_horizon() {
        if horizon > max {
            return Err(Error::Contract(format!(
                "horizon {horizon} exceeds the stored ground truth (max horizon {max})"
            )));
        }
    }
    let mesh = builder.mesh();
    initial.validate(mesh)?;
    let mut frames = Vec::with_capacity(horizon);
    let mut contact_counts = Vec::with_capacity(horizon);
    let mut attention = keep_attention.then(Vec::new);
    let mut current = initial.clone();
    for step in 1..=horizon {
        contact_counts.push(builder.contact_edges(&current.positions).len());
        let (mut next, traces) = predictor.step(builder, &current)?;
        driver.apply(step, mesh, initial, &mut next);
        let bad = next
            .positions
            .iter()
            .chain(&next.velocities)
            .chain(&next.hardening)
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::RolloutAbort {
                step,
                reason: "non-finite predicted state".into(),
            });
        }
        if let Some(a) = attention.as_mut() {
            a.push(traces.into_iter().map(|t| t.weights).collect());
        }
        frames.push(next.clone());
        current = next;
    }
    Ok(RolloutResult {
        initial: initial.clone(),
        frames,
        contact_counts,
        attention,
    })
}

/// Slice weights of one block with the node positions they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    /// `N×d` current positions.
    pub positions: Tensor,
    /// `N×P`; column `j` is the field of token `j`.
    pub weights: Tensor,
}

impl AttentionMap {
    pub fn to_container(&self) -> Result<Container, Error> {
        let mut c = Container::new();
        c.push_tensor("positions", &self.positions)?;
        c.push_tensor("weights", &self.weights)?;
        c.meta = serde_json::json!({ "block": self.block });
        Ok(c)
    }
}

/// Eval-mode slice weights of `block` for `frame`.
pub fn export_attention(
    predictor: &ModelPredictor,
    builder: &GraphBuilder,
    frame: &FrameState,
    block: usize,
) -> Result<AttentionMap, Error> {
    let n_blocks = predictor.model.config().n_transformer_blocks;
    if block >= n_blocks {
        return Err(Error::Contract(format!(
            "block index {block} out of range (model has {n_blocks} transformer blocks)"
        )));
    }
    let (_, traces) = predictor.step(builder, frame)?;
    let mesh = builder.mesh();
    Ok(AttentionMap {
        block,
        positions: Tensor::from_vec(mesh.n_nodes(), mesh.dim(), frame.positions.clone())?,
        weights: traces[block].weights.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TargetMode;
    use crate::synthetic::{impact_graph_config, simulate_impact, OracleConfig};
    use crate::training::TrainingSet;

    fn setup() -> (TrainingSet, GraphConfig) {
        let cfg = OracleConfig {
            frames: 30,
            ..Default::default()
        };
        let g = impact_graph_config(&cfg);
        (TrainingSet::new(vec![simulate_impact(&cfg).unwrap()], &g).unwrap(), g)
    }

    fn predictor(set: &TrainingSet) -> ModelPredictor {
        let mut c = ModelConfig::mgnt(set.items[0].builder.dims(), 8);
        c.n_tokens = 4;
        c.transformer_dims = [8, 4, 8];
        c.n_heads = 2;
        c.target_mode = TargetMode::Delta;
        ModelPredictor::new(Model::new(c, 1).unwrap(), set.normalizer.clone())
    }

    #[test]
    fn identity_predictor_freezes_state() {
        let (set, _) = setup();
        let item = &set.items[0];
        let f0 = &item.trajectory.frames[3];
        let r = rollout(&IdentityPredictor, &item.builder, f0, 5, &BoundaryDriver::Frozen, false).unwrap();
        assert_eq!(r.horizon(), 5);
        assert!(r.frames.iter().all(|f| f == f0));
    }

    #[test]
    fn boundary_nodes_follow_ground_truth_bitwise() {
        let (set, _) = setup();
        let item = &set.items[0];
        let p = predictor(&set);
        let frames = &item.trajectory.frames;
        let r = rollout(&p, &item.builder, &frames[0], 29, &BoundaryDriver::GroundTruth(frames), true).unwrap();
        let mesh = item.mesh();
        for (t, f) in r.frames.iter().enumerate() {
            for i in (0..mesh.n_nodes()).filter(|&i| !mesh.is_deformable(i)) {
                assert_eq!(f.positions[2 * i].to_bits(), frames[t + 1].positions[2 * i].to_bits());
                assert_eq!(f.positions[2 * i + 1].to_bits(), frames[t + 1].positions[2 * i + 1].to_bits());
            }
            assert_eq!(f.positions.len(), frames[0].positions.len());
        }
        assert_eq!(r.attention.unwrap().len(), 29);
        let e = rollout(&p, &item.builder, &frames[0], 30, &BoundaryDriver::GroundTruth(frames), false).unwrap_err();
        assert!(e.to_string().contains("max horizon 29"), "{e}");
    }

    #[test]
    fn horizon_one_is_one_forward_pass() {
        let (set, _) = setup();
        let item = &set.items[0];
        let p = predictor(&set);
        let f = &item.trajectory.frames[4];
        let r = rollout(&p, &item.builder, f, 1, &BoundaryDriver::Frozen, false).unwrap();
        let (mut direct, _) = p.step(&item.builder, f).unwrap();
        copy_boundary(item.mesh(), f, &mut direct);
        assert_eq!(r.frames[0], direct);
    }

    #[test]
    fn contact_appears_during_impact() {
        let (set, _) = setup();
        let item = &set.items[0];
        let frames = &item.trajectory.frames;
        let replay = ReplayPredictor::new(vec![item.trajectory.clone()]);
        let r = rollout(&replay, &item.builder, &frames[0], 29, &BoundaryDriver::GroundTruth(frames), false).unwrap();
        // The body starts within the contact radius of the wall and sinks closer.
        let peak = *r.contact_counts.iter().max().unwrap();
        assert!(peak > r.contact_counts[0] && peak > 0);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (set, _) = setup();
        let item = &set.items[0];
        let p = predictor(&set);
        let a = export_attention(&p, &item.builder, &item.trajectory.frames[20], 1).unwrap();
        for i in 0..a.weights.rows() {
            let s: f64 = a.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(a.weights.row(i).iter().all(|&w| w >= 0.0));
        }
        assert!(export_attention(&p, &item.builder, &item.trajectory.frames[0], 2).is_err());
        let c = a.to_container().unwrap();
        assert_eq!(c.tensor("weights").unwrap(), a.weights);
    }

    #[test]
    fn model_file_round_trip() {
        let (set, g) = setup();
        let p = predictor(&set);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mgnt");
        p.to_container(&g).unwrap().write(&path).unwrap();
        let (q, g2) = ModelPredictor::read(&path).unwrap();
        assert_eq!(g2, g);
        assert_eq!(q.model.params().values(), p.model.params().values());
        let f = &set.items[0].trajectory.frames[5];
        assert_eq!(q.step(&set.items[0].builder, f).unwrap().0, p.step(&set.items[0].builder, f).unwrap().0);
        std::fs::write(&path, b"junk").unwrap();
        assert!(ModelPredictor::read(&path).is_err());
    }
}
