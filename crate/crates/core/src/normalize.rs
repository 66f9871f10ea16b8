//! Feature statistics and the mapping between network outputs and physical
//! next-step states.

use crate::autodiff::{Tape, Var};
use crate::container::Container;
use crate::error::{Error, TensorError};
use crate::graph::{GraphBuilder, GraphSample};
use crate::mesh::{FrameState, Mesh};
use crate::model::TargetMode;
use crate::tensor::Tensor;
use crate::trajectory::Trajectory;

pub const STD_FLOOR: f64 = 1e-8;

/// Streaming per-column mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(width: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, row: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(row) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    pub fn push_rows(&mut self, t: &Tensor) {
        (0..t.rows()).for_each(|r| self.push(t.row(r)));
    }

    /// Population statistics; an empty accumulator yields mean 0, std 1.
    pub fn stats(&self) -> Stats {
        if self.n == 0 {
            return Stats::identity(self.mean.len());
        }
        Stats {
            mean: self.mean.clone(),
            std: self
                .m2
                .iter()
                .map(|s| (s / self.n as f64).sqrt().max(STD_FLOOR))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    fn write(&self, c: &mut Container, name: &str) -> Result<(), Error> {
        let w = self.width();
        c.push_f64(&format!("norm/{name}/mean"), &[w], self.mean.clone())?;
        c.push_f64(&format!("norm/{name}/std"), &[w], self.std.clone())?;
        Ok(())
    }

    fn read(c: &Container, name: &str) -> Result<Self, Error> {
        Ok(Self {
            mean: c.f64(&format!("norm/{name}/mean"))?.1.to_vec(),
            std: c.f64(&format!("norm/{name}/std"))?.1.to_vec(),
        })
    }
}

/// Per-node physical state `(u, v, alpha)` with `u = x - X`.
pub fn state_matrix(mesh: &Mesh, frame: &FrameState) -> Tensor {
    let d = mesh.dim();
    let x0 = mesh.reference();
    let mut out = Tensor::zeros(mesh.n_nodes(), 2 * d + 1);
    for i in 0..mesh.n_nodes() {
        let row = out.row_mut(i);
        for a in 0..d {
            row[a] = frame.positions[i * d + a] - x0[i * d + a];
            row[d + a] = frame.velocities[i * d + a];
        }
        row[2 * d] = frame.hardening[i];
    }
    out
}

/// Inverse of [`state_matrix`].
pub fn frame_from_state(mesh: &Mesh, state: &Tensor) -> FrameState {
    let d = mesh.dim();
    let x0 = mesh.reference();
    let n = mesh.n_nodes();
    let mut f = FrameState {
        positions: vec![0.0; n * d],
        velocities: vec![0.0; n * d],
        hardening: vec![0.0; n],
    };
    for i in 0..n {
        let row = state.row(i);
        for a in 0..d {
            f.positions[i * d + a] = x0[i * d + a] + row[a];
            f.velocities[i * d + a] = row[d + a];
        }
        f.hardening[i] = row[2 * d];
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub node: Stats,
    pub mesh_edge: Stats,
    pub contact_edge: Stats,
    /// Next-step state over deformable nodes.
    pub target: Stats,
    /// One-step change over deformable nodes.
    pub delta: Stats,
}

impl Normalizer {
    /// One streaming pass over every frame of the training trajectories.
    pub fn fit<'a>(items: impl IntoIterator<Item = (&'a GraphBuilder, &'a Trajectory)>) -> Self {
        let mut acc: Option<[Welford; 5]> = None;
        for (builder, traj) in items {
            let dims = builder.dims();
            let acc = acc.get_or_insert_with(|| {
                [
                    Welford::new(dims.node),
                    Welford::new(dims.mesh_edge),
                    Welford::new(dims.contact_edge),
                    Welford::new(dims.output),
                    Welford::new(dims.output),
                ]
            });
            let mask = traj.mesh.deformable_mask();
            let mut prev: Option<Tensor> = None;
            for frame in &traj.frames {
                let s = builder.build(frame);
                acc[0].push_rows(&s.node_features);
                acc[1].push_rows(&s.mesh_features);
                acc[2].push_rows(&s.contact_features);
                let y = state_matrix(&traj.mesh, frame);
                if let Some(p) = &prev {
                    for i in (0..y.rows()).filter(|&i| mask[i]) {
                        acc[3].push(y.row(i));
                        let d: Vec<f64> = y.row(i).iter().zip(p.row(i)).map(|(a, b)| a - b).collect();
                        acc[4].push(&d);
                    }
                }
                prev = Some(y);
            }
        }
        let [node, mesh_edge, contact_edge, target, delta] = acc.expect("at least one trajectory").map(|w| w.stats());
        Self {
            node,
            mesh_edge,
            contact_edge,
            target,
            delta,
        }
    }

    pub fn normalize_sample(&self, s: &GraphSample) -> GraphSample {
        GraphSample {
            node_features: self.node.normalize(&s.node_features),
            mesh_features: self.mesh_edge.normalize(&s.mesh_features),
            contact_features: self.contact_edge.normalize(&s.contact_features),
            ..s.clone()
        }
    }

    pub fn target_stats(&self, mode: TargetMode) -> &Stats {
        match mode {
            TargetMode::Absolute => &self.target,
            TargetMode::Delta => &self.delta,
        }
    }

    pub fn write_arrays(&self, c: &mut Container) -> Result<(), Error> {
        self.node.write(c, "node")?;
        self.mesh_edge.write(c, "mesh_edge")?;
        self.contact_edge.write(c, "contact_edge")?;
        self.target.write(c, "target")?;
        self.delta.write(c, "delta")
    }

    pub fn from_container(c: &Container) -> Result<Self, Error> {
        Ok(Self {
            node: Stats::read(c, "node")?,
            mesh_edge: Stats::read(c, "mesh_edge")?,
            contact_edge: Stats::read(c, "contact_edge")?,
            target: Stats::read(c, "target")?,
            delta: Stats::read(c, "delta")?,
        })
    }
}

/// Maps raw network outputs to normalized next-step targets and physical
/// states. With `monotone` set, the last output column is a hardening
/// increment passed through softplus.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub mode: TargetMode,
    pub monotone: bool,
    pub stats: Stats,
    delta_alpha_std: f64,
}

impl OutputHead {
    pub fn new(norm: &Normalizer, mode: TargetMode, monotone: bool) -> Self {
        let w = norm.delta.width();
        Self {
            mode,
            monotone,
            stats: norm.target_stats(mode).clone(),
            delta_alpha_std: norm.delta.std[w - 1],
        }
    }

    fn width(&self) -> usize {
        self.stats.width()
    }

    /// Physical target for the step `current -> next`.
    pub fn physical_target(&self, current: &Tensor, next: &Tensor) -> Tensor {
        match self.mode {
            TargetMode::Absolute => next.clone(),
            TargetMode::Delta => {
                let mut d = next.clone();
                for (v, c) in d.data_mut().iter_mut().zip(current.data()) {
                    *v -= c;
                }
                d
            }
        }
    }

    pub fn normalized_target(&self, current: &Tensor, next: &Tensor) -> Tensor {
        self.stats.normalize(&self.physical_target(current, next))
    }

    /// Per-node offset for the hardening column, `N×1`.
    pub fn alpha_offset(&self, current: &Tensor) -> Tensor {
        let k = self.width() - 1;
        let (m, s) = (self.stats.mean[k], self.stats.std[k]);
        let mut out = Tensor::zeros(current.rows(), 1);
        for i in 0..current.rows() {
            let base = match self.mode {
                TargetMode::Absolute => current.get(i, k),
                TargetMode::Delta => 0.0,
            };
            out.set(i, 0, (base - m) / s);
        }
        out
    }

    /// Normalized prediction from raw output `o`.
    pub fn normalized_prediction<'t>(&self, o: Var<'t>, alpha_offset: &Tensor) -> Result<Var<'t>, TensorError> {
        if !self.monotone {
            return Ok(o);
        }
        let k = self.width() - 1;
        let scale = self.delta_alpha_std / self.stats.std[k];
        let alpha = o
            .slice_cols(k, 1)?
            .softplus()
            .scale(scale)
            .add(o.tape().constant(alpha_offset.clone()))?;
        Var::concat_cols(&[o.slice_cols(0, k)?, alpha])
    }

    /// Physical next state `(u, v, alpha)` from raw output.
    pub fn decode(&self, output: &Tensor, current: &Tensor) -> Result<Tensor, TensorError> {
        let tape = Tape::new();
        let pred = self
            .normalized_prediction(tape.constant(output.clone()), &self.alpha_offset(current))?
            .value();
        let mut y = self.stats.denormalize(&pred);
        if self.mode == TargetMode::Delta {
            y.add_assign(current);
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn welford_matches_two_pass() {
        let rows = [[1.0, 10.0], [2.0, 10.0], [4.0, 10.0], [7.0, 10.0]];
        let mut w = Welford::new(2);
        rows.iter().for_each(|r| w.push(r));
        let s = w.stats();
        let mean = 3.5;
        let var = rows.iter().map(|r| (r[0] - mean) * (r[0] - mean)).sum::<f64>() / 4.0;
        assert!((s.mean[0] - mean).abs() < 1e-15);
        assert!((s.std[0] - var.sqrt()).abs() < 1e-14);
        assert_eq!(s.std[1], STD_FLOOR);
        assert_eq!(Welford::new(3).stats(), Stats::identity(3));
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            vals in proptest::collection::vec(-100.0f64..100.0, 12),
            mean in proptest::collection::vec(-5.0f64..5.0, 3),
            std in proptest::collection::vec(1e-3f64..50.0, 3),
        ) {
            let s = Stats { mean, std };
            let t = Tensor::from_vec(4, 3, vals).unwrap();
            let back = s.denormalize(&s.normalize(&t));
            prop_assert!(back.max_abs_diff(&t) < 1e-10);
        }
    }

    fn head(mode: TargetMode, monotone: bool) -> OutputHead {
        let st = Stats {
            mean: vec![0.1, -0.2, 0.3],
            std: vec![2.0, 0.5, 0.04],
        };
        let norm = Normalizer {
            node: Stats::identity(1),
            mesh_edge: Stats::identity(1),
            contact_edge: Stats::identity(1),
            target: st.clone(),
            delta: Stats {
                mean: vec![0.0, 0.0, 0.01],
                std: vec![0.1, 0.2, 0.02],
            },
        };
        OutputHead::new(&norm, mode, monotone)
    }

    #[test]
    fn decode_inverts_normalized_target() {
        let cur = Tensor::from_rows(&[&[0.5, 1.0, 0.2], &[-0.3, 0.0, 0.0]]);
        let next = Tensor::from_rows(&[&[0.6, 0.8, 0.25], &[-0.1, 0.4, 0.1]]);
        for mode in [TargetMode::Absolute, TargetMode::Delta] {
            let h = head(mode, false);
            let o = h.normalized_target(&cur, &next);
            assert!(h.decode(&o, &cur).unwrap().max_abs_diff(&next) < 1e-12);
        }
    }

    #[test]
    fn monotone_head_never_lowers_hardening() {
        let cur = Tensor::from_rows(&[&[0.0, 0.0, 0.2], &[0.0, 0.0, 0.0]]);
        let o = Tensor::from_rows(&[&[0.0, 0.0, -40.0], &[1.0, 1.0, 3.0]]);
        for mode in [TargetMode::Absolute, TargetMode::Delta] {
            let y = head(mode, true).decode(&o, &cur).unwrap();
            for i in 0..2 {
                assert!(y.get(i, 2) >= cur.get(i, 2));
            }
            // softplus(3) increment scaled by the delta std.
            let want = crate::autodiff::softplus(3.0) * 0.02;
            assert!((y.get(1, 2) - want).abs() < 1e-12);
        }
    }
}
