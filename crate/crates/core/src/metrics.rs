//! Error metrics and physical-consistency checks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph::GraphConfig;
use crate::mesh::{FrameState, Mesh};
use crate::normalize::state_matrix;
use crate::rollout::{rollout, BoundaryDriver, StepPredictor};
use crate::synthetic::run_indexed;
use crate::tensor::Tensor;
use crate::training::TrainingTrajectory;
use crate::trajectory::Trajectory;

/// A named set of columns of the `(u, v, alpha)` state matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableGroup {
    pub name: String,
    pub columns: Vec<usize>,
}

/// Displacement, velocity and hardening groups for dimension `dim`.
pub fn default_groups(dim: usize) -> Vec<VariableGroup> {
    vec![
        VariableGroup {
            name: "displacement".into(),
            columns: (0..dim).collect(),
        },
        VariableGroup {
            name: "velocity".into(),
            columns: (dim..2 * dim).collect(),
        },
        VariableGroup {
            name: "hardening".into(),
            columns: vec![2 * dim],
        },
    ]
}

/// One state matrix per frame.
pub type StateSeq = Vec<Tensor>;

pub fn state_sequence(mesh: &Mesh, frames: &[FrameState]) -> StateSeq {
    frames.iter().map(|f| state_matrix(mesh, f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub name: String,
    /// Pooled over every entry of every trajectory.
    pub value: f64,
    pub per_trajectory: Vec<Option<f64>>,
    /// Standard error of the per-trajectory values; needs two of them.
    pub std_error: Option<f64>,
    /// Trajectories excluded because the metric is undefined for them.
    pub undefined: usize,
}

fn std_error(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

fn check_aligned(preds: &[StateSeq], gts: &[StateSeq], rows: &[Vec<usize>]) -> Result<(), Error> {
    if preds.len() != gts.len() || preds.len() != rows.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "metric needs matching non-empty sets ({} predicted, {} ground truth)",
            preds.len(),
            gts.len()
        )));
    }
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() || p.iter().zip(g).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Contract(format!("trajectory {k}: predicted and ground-truth shapes differ")));
        }
    }
    Ok(())
}

/// `(sum of squares, count, max |gt|)` of one trajectory and group.
fn accumulate(p: &StateSeq, g: &StateSeq, rows: &[usize], cols: &[usize]) -> (f64, usize, f64) {
    let (mut s, mut n, mut m) = (0.0, 0, 0.0f64);
    for (a, b) in p.iter().zip(g) {
        for &i in rows {
            for &c in cols {
                let e = a.get(i, c) - b.get(i, c);
                s += e * e;
                n += 1;
                m = m.max(b.get(i, c).abs());
            }
        }
    }
    (s, n, m)
}

/// Root of the mean squared error over frames, `rows` and the group columns.
/// `rows[k]` lists the nodes scored in trajectory `k`.
pub fn rmse_all(
    preds: &[StateSeq],
    gts: &[StateSeq],
    rows: &[Vec<usize>],
    groups: &[VariableGroup],
) -> Result<Vec<GroupStat>, Error> {
    check_aligned(preds, gts, rows)?;
    Ok(groups
        .iter()
        .map(|grp| {
            let parts: Vec<_> = (0..preds.len())
                .map(|k| accumulate(&preds[k], &gts[k], &rows[k], &grp.columns))
                .collect();
            let (s, n) = parts.iter().fold((0.0, 0), |(s, n), p| (s + p.0, n + p.1));
            let per: Vec<f64> = parts.iter().map(|p| (p.0 / p.1.max(1) as f64).sqrt()).collect();
            GroupStat {
                name: grp.name.clone(),
                value: (s / n.max(1) as f64).sqrt(),
                std_error: std_error(&per),
                per_trajectory: per.into_iter().map(Some).collect(),
                undefined: 0,
            }
        })
        .collect())
}

/// Per-trajectory RMSE divided by the largest ground-truth magnitude of the
/// group in that trajectory, in percent, averaged over trajectories where it
/// is defined.
pub fn r_rmse(
    preds: &[StateSeq],
    gts: &[StateSeq],
    rows: &[Vec<usize>],
    groups: &[VariableGroup],
) -> Result<Vec<GroupStat>, Error> {
    check_aligned(preds, gts, rows)?;
    Ok(groups
        .iter()
        .map(|grp| {
            let per: Vec<Option<f64>> = (0..preds.len())
                .map(|k| {
                    let (s, n, m) = accumulate(&preds[k], &gts[k], &rows[k], &grp.columns);
                    (m > 0.0).then(|| 100.0 * (s / n.max(1) as f64).sqrt() / m)
                })
                .collect();
            let defined: Vec<f64> = per.iter().flatten().copied().collect();
            GroupStat {
                name: grp.name.clone(),
                value: if defined.is_empty() {
                    f64::NAN
                } else {
                    defined.iter().sum::<f64>() / defined.len() as f64
                },
                std_error: std_error(&defined),
                undefined: per.len() - defined.len(),
                per_trajectory: per,
            }
        })
        .collect())
}

/// One-step predictions from every ground-truth frame, aligned with frames
/// `1..T`.
pub fn one_step_predictions(
    predictor: &dyn StepPredictor,
    item: &TrainingTrajectory,
) -> Result<(StateSeq, StateSeq), Error> {
    let frames = &item.trajectory.frames;
    let mesh = item.mesh();
    let mut pred = Vec::with_capacity(frames.len().saturating_sub(1));
    for t in 0..frames.len().saturating_sub(1) {
        let r = rollout(predictor, &item.builder, &frames[t], 1, &BoundaryDriver::GroundTruth(&frames[t..]), false)?;
        pred.push(state_matrix(mesh, &r.frames[0]));
    }
    Ok((pred, state_sequence(mesh, &frames[1..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardeningCheck {
    pub sums: Vec<f64>,
    pub tolerance: f64,
    pub violations: usize,
}

/// Hardening sums per frame and the count of drops larger than
/// `1e-9 * max |S|`.
pub fn hardening_monotonicity(frames: &[FrameState]) -> HardeningCheck {
    let sums: Vec<f64> = frames.iter().map(|f| f.hardening.iter().sum()).collect();
    let tolerance = 1e-9 * sums.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let violations = sums.windows(2).filter(|w| w[1] < w[0] - tolerance).count();
    HardeningCheck {
        sums,
        tolerance,
        violations,
    }
}

/// Per-frame sum of squared node speeds (unit mass).
pub fn kinetic_proxy(frames: &[FrameState]) -> Vec<f64> {
    frames.iter().map(|f| f.velocities.iter().map(|v| v * v).sum()).collect()
}

/// Per-frame sum of node speeds.
pub fn speed_proxy(frames: &[FrameState], dim: usize) -> Vec<f64> {
    frames
        .iter()
        .map(|f| {
            f.velocities
                .chunks(dim)
                .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCurves {
    pub predicted_hardening: HardeningCheck,
    pub ground_truth_hardening: HardeningCheck,
    pub predicted_kinetic: Vec<f64>,
    pub ground_truth_kinetic: Vec<f64>,
    pub predicted_speed: Vec<f64>,
    pub ground_truth_speed: Vec<f64>,
    pub contact_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub rmse_1: Vec<GroupStat>,
    pub rmse_all: Vec<GroupStat>,
    pub r_rmse: Vec<GroupStat>,
    pub consistency: Vec<ConsistencyCurves>,
}

impl MetricsReport {
    pub fn group<'a>(stats: &'a [GroupStat], name: &str) -> Option<&'a GroupStat> {
        stats.iter().find(|g| g.name == name)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per trajectory and frame of the consistency curves.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from(
            "trajectory,frame,hardening_pred,hardening_gt,kinetic_pred,kinetic_gt,speed_pred,speed_gt,contacts\n",
        );
        for (k, c) in self.consistency.iter().enumerate() {
            for t in 0..c.predicted_hardening.sums.len() {
                let contacts = if t == 0 { String::new() } else { c.contact_counts[t - 1].to_string() };
                let _ = writeln!(
                    s,
                    "{k},{t},{:e},{:e},{:e},{:e},{:e},{:e},{contacts}",
                    c.predicted_hardening.sums[t],
                    c.ground_truth_hardening.sums[t],
                    c.predicted_kinetic[t],
                    c.ground_truth_kinetic[t],
                    c.predicted_speed[t],
                    c.ground_truth_speed[t],
                );
            }
        }
        s
    }
}

fn deformable_rows(mesh: &Mesh) -> Vec<usize> {
    (0..mesh.n_nodes()).filter(|&i| mesh.is_deformable(i)).collect()
}

/// Rolls out every trajectory from its first frame with ground-truth boundary
/// motion and reduces all metrics over deformable nodes. `horizon` defaults to
/// the stored length.
pub fn evaluate(
    predictor: &dyn StepPredictor,
    trajectories: &[Trajectory],
    graph: &GraphConfig,
    horizon: Option<usize>,
    workers: usize,
) -> Result<MetricsReport, Error> {
    if trajectories.is_empty() {
        return Err(Error::Contract("evaluation needs at least one trajectory".into()));
    }
    let dim = trajectories[0].mesh.dim();
    let groups = default_groups(dim);
    let horizon = horizon.unwrap_or(trajectories.iter().map(|t| t.len()).min().unwrap_or(1).saturating_sub(1));
    struct One {
        rows: Vec<usize>,
        pred: StateSeq,
        gt: StateSeq,
        p1: StateSeq,
        g1: StateSeq,
        curves: ConsistencyCurves,
    }
    let results = run_indexed(trajectories.len(), workers, |k| {
        let item = TrainingTrajectory::new(trajectories[k].clone(), graph)?;
        let frames = &item.trajectory.frames;
        let mesh = item.mesh();
        let r = rollout(predictor, &item.builder, &frames[0], horizon, &BoundaryDriver::GroundTruth(frames), false)?;
        let (p1, g1) = one_step_predictions(predictor, &item)?;
        let all = r.all_frames();
        let gt_frames = &frames[..=horizon];
        Ok(One {
            rows: deformable_rows(mesh),
            pred: state_sequence(mesh, &r.frames),
            gt: state_sequence(mesh, &frames[1..=horizon]),
            p1,
            g1,
            curves: ConsistencyCurves {
                predicted_hardening: hardening_monotonicity(&all),
                ground_truth_hardening: hardening_monotonicity(gt_frames),
                predicted_kinetic: kinetic_proxy(&all),
                ground_truth_kinetic: kinetic_proxy(gt_frames),
                predicted_speed: speed_proxy(&all, dim),
                ground_truth_speed: speed_proxy(gt_frames, dim),
                contact_counts: r.contact_counts,
            },
        })
    })?;
    let rows: Vec<_> = results.iter().map(|o| o.rows.clone()).collect();
    let preds: Vec<_> = results.iter().map(|o| o.pred.clone()).collect();
    let gts: Vec<_> = results.iter().map(|o| o.gt.clone()).collect();
    let p1: Vec<_> = results.iter().map(|o| o.p1.clone()).collect();
    let g1: Vec<_> = results.iter().map(|o| o.g1.clone()).collect();
    Ok(MetricsReport {
        n_trajectories: trajectories.len(),
        horizon,
        rmse_1: rmse_all(&p1, &g1, &rows, &groups)?,
        rmse_all: rmse_all(&preds, &gts, &rows, &groups)?,
        r_rmse: r_rmse(&preds, &gts, &rows, &groups)?,
        consistency: results.into_iter().map(|o| o.curves).collect(),
    })
}
