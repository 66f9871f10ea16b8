//! Ground-truth generators: an elastoplastic spring lattice dropped onto a
//! rigid wall, and a long elastic chain relaxed quasi-statically under an end
//! drive.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error};
use crate::graph::{build_mesh_edges, build_tied_edges_within, median_edge_length, GraphConfig};
use crate::mesh::{FrameState, Mesh, NodeType};
use crate::trajectory::{Manifest, ManifestEntry, Split, Trajectory, MANIFEST_FORMAT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub rows: usize,
    pub cols: usize,
    /// Rows below this index form the first component, the rest the second.
    /// Zero keeps the lattice in one piece.
    pub split_row: usize,
    pub spacing: f64,
    pub node_mass: f64,
    /// Spring stiffness (force per unit strain) at `kappa_ref`.
    pub stiffness: f64,
    pub kappa_ref: f64,
    pub kappa: f64,
    pub yield_strain: f64,
    /// Hardening modulus as a fraction of the spring stiffness.
    pub hardening_ratio: f64,
    /// Spring dashpot as a fraction of critical damping.
    pub damping_ratio: f64,
    pub gravity: f64,
    pub wall_y: f64,
    pub wall_x: [f64; 2],
    pub wall_spacing: f64,
    /// Wall penalty stiffness as a multiple of the spring stiffness.
    pub wall_stiffness_ratio: f64,
    /// Gap between the lowest lattice node and the wall at t = 0.
    pub drop_height: f64,
    pub impact_speed: f64,
    pub tilt_deg: f64,
    pub dt: f64,
    pub substeps: usize,
    pub frames: usize,
    pub tied_k: usize,
    /// Any coordinate beyond this magnitude aborts the run.
    pub bound: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            split_row: 4,
            spacing: 1.0,
            node_mass: 1.0,
            stiffness: 2000.0,
            kappa_ref: 0.2,
            kappa: 0.2,
            yield_strain: 0.02,
            hardening_ratio: 0.1,
            damping_ratio: 0.05,
            gravity: -9.81,
            wall_y: 0.0,
            wall_x: [-2.0, 9.0],
            wall_spacing: 0.5,
            wall_stiffness_ratio: 20.0,
            drop_height: 0.6,
            impact_speed: 4.0,
            tilt_deg: 8.0,
            dt: 5e-4,
            substeps: 20,
            frames: 50,
            tied_k: 3,
            bound: 1e3,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("spacing", self.spacing),
            ("node_mass", self.node_mass),
            ("stiffness", self.stiffness),
            ("kappa_ref", self.kappa_ref),
            ("kappa", self.kappa),
            ("yield_strain", self.yield_strain),
            ("wall_spacing", self.wall_spacing),
            ("wall_stiffness_ratio", self.wall_stiffness_ratio),
            ("dt", self.dt),
            ("bound", self.bound),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(ConfigError::Invalid(format!("data.{name} must be positive (got {v})")));
            }
        }
        for (name, v) in [
            ("hardening_ratio", self.hardening_ratio),
            ("damping_ratio", self.damping_ratio),
            ("drop_height", self.drop_height),
        ] {
            if !(v >= 0.0) {
                return Err(ConfigError::Invalid(format!("data.{name} must be non-negative (got {v})")));
            }
        }
        if self.rows < 2 || self.cols < 2 || self.substeps == 0 || self.frames < 2 || self.tied_k == 0 {
            return Err(ConfigError::Invalid(
                "data.rows and data.cols need at least 2, frames at least 2, substeps and tied_k at least 1".into(),
            ));
        }
        if self.wall_x[1] < self.wall_x[0] {
            return Err(ConfigError::Invalid("data.wall_x must be increasing".into()));
        }
        Ok(())
    }

    /// Spring stiffness for the configured `kappa`.
    pub fn spring_stiffness(&self) -> f64 {
        self.stiffness * self.kappa / self.kappa_ref
    }

    pub fn material(&self) -> Material {
        let e = self.spring_stiffness();
        Material {
            stiffness: e,
            hardening: self.hardening_ratio * e,
            yield_force: self.yield_strain * e,
        }
    }
}

/// One-dimensional spring plasticity with linear isotropic hardening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub stiffness: f64,
    pub hardening: f64,
    pub yield_force: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringState {
    pub rest: f64,
    pub plastic_rest: f64,
    /// Accumulated plastic strain.
    pub alpha: f64,
}

impl SpringState {
    pub fn new(rest: f64) -> Self {
        Self {
            rest,
            plastic_rest: rest,
            alpha: 0.0,
        }
    }
}

/// Return mapping at the current `length`. Updates the plastic rest length
/// and returns `(axial force, plastic strain increment)`.
pub fn return_map(s: &mut SpringState, length: f64, m: &Material) -> (f64, f64) {
    let trial = m.stiffness * (length - s.plastic_rest) / s.rest;
    let f = trial.abs() - (m.yield_force + m.hardening * s.alpha);
    if f <= 0.0 {
        return (trial, 0.0);
    }
    let dgamma = f / (m.stiffness + m.hardening);
    let sign = trial.signum();
    s.plastic_rest += sign * dgamma * s.rest;
    s.alpha += dgamma;
    (trial - sign * m.stiffness * dgamma, dgamma)
}

/// Mesh for the impact problem: lattice nodes first (row-major), then wall
/// nodes. The lattice is tilted and lifted to its initial pose.
pub fn impact_mesh(cfg: &OracleConfig) -> Result<Mesh, Error> {
    cfg.validate()?;
    let (rows, cols, h) = (cfg.rows, cfg.cols, cfg.spacing);
    let (cx, cy) = (0.5 * (cols - 1) as f64 * h, 0.5 * (rows - 1) as f64 * h);
    let (sin, cos) = cfg.tilt_deg.to_radians().sin_cos();
    let mut x = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (px, py) = (c as f64 * h - cx, r as f64 * h - cy);
            x.extend([cx + cos * px - sin * py, cy + sin * px + cos * py]);
        }
    }
    let min_y = x.iter().skip(1).step_by(2).copied().fold(f64::INFINITY, f64::min);
    let lift = cfg.wall_y + cfg.drop_height - min_y;
    x.iter_mut().skip(1).step_by(2).for_each(|y| *y += lift);

    let split = if cfg.split_row > 0 && cfg.split_row < rows { cfg.split_row } else { rows };
    let mut elements = Vec::new();
    for r in 0..rows - 1 {
        if r + 1 == split {
            continue;
        }
        for c in 0..cols - 1 {
            let a = r * cols + c;
            elements.push(vec![a, a + 1, a + cols + 1]);
            elements.push(vec![a, a + cols + 1, a + cols]);
        }
    }
    let n_body = rows * cols;
    let mut component: Vec<usize> = (0..n_body).map(|i| usize::from(i / cols >= split)).collect();
    let wall_comp = if split < rows { 2 } else { 1 };
    let n_wall = ((cfg.wall_x[1] - cfg.wall_x[0]) / cfg.wall_spacing + 1e-9).floor() as usize + 1;
    for k in 0..n_wall {
        x.extend([cfg.wall_x[0] + k as f64 * cfg.wall_spacing, cfg.wall_y]);
        if k > 0 {
            elements.push(vec![n_body + k - 1, n_body + k]);
        }
    }
    component.extend(std::iter::repeat_n(wall_comp, n_wall));
    let mut types = vec![NodeType::Deformable; n_body];
    types.extend(std::iter::repeat_n(NodeType::Rigid, n_wall));
    Ok(Mesh::new(2, x, elements, types, component)?)
}

/// Springs along mesh and tied edges between deformable nodes.
fn impact_springs(mesh: &Mesh, tied_k: usize) -> Result<Vec<(usize, usize, SpringState)>, Error> {
    let edges = build_mesh_edges(mesh)?;
    let radius = median_edge_length(mesh, &edges).map_or(f64::INFINITY, |m| 3.0 * m);
    let tied = build_tied_edges_within(mesh, tied_k, radius)?;
    let mut pairs: Vec<(usize, usize)> = edges
        .into_iter()
        .chain(tied)
        .filter(|&(i, j)| i < j && mesh.is_deformable(i) && mesh.is_deformable(j))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (mesh.reference_of(i), mesh.reference_of(j));
            let rest = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            (i, j, SpringState::new(rest))
        })
        .collect())
}

/// Semi-implicit Euler integration of the lattice impact.
pub fn simulate_impact(cfg: &OracleConfig) -> Result<Trajectory, Error> {
    let mesh = impact_mesh(cfg)?;
    let mut springs = impact_springs(&mesh, cfg.tied_k)?;
    let mat = cfg.material();
    let m = cfg.node_mass;
    let c_spring = cfg.damping_ratio * 2.0 * (mat.stiffness * m).sqrt();
    let k_wall = cfg.wall_stiffness_ratio * mat.stiffness;
    let c_wall = 2.0 * (k_wall * m).sqrt();
    let n = mesh.n_nodes();
    let deformable = mesh.deformable_mask();

    let mut state = FrameState::at_rest(&mesh);
    for i in (0..n).filter(|&i| deformable[i]) {
        state.velocities[2 * i + 1] = -cfg.impact_speed;
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    frames.push(state.clone());
    let mut force = vec![0.0; 2 * n];
    let dt = cfg.dt;
    for step in 1..cfg.frames * cfg.substeps - cfg.substeps + 1 {
        let (x, v, alpha) = (&mut state.positions, &mut state.velocities, &mut state.hardening);
        for i in 0..n {
            force[2 * i] = 0.0;
            force[2 * i + 1] = if deformable[i] { m * cfg.gravity } else { 0.0 };
        }
        for (i, j, s) in springs.iter_mut() {
            let (i, j) = (*i, *j);
            let d = [x[2 * j] - x[2 * i], x[2 * j + 1] - x[2 * i + 1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let dir = [d[0] / len, d[1] / len];
            let (elastic, dgamma) = return_map(s, len, &mat);
            if dgamma > 0.0 {
                alpha[i] += 0.5 * dgamma;
                alpha[j] += 0.5 * dgamma;
            }
            let rel = (v[2 * j] - v[2 * i]) * dir[0] + (v[2 * j + 1] - v[2 * i + 1]) * dir[1];
            let f = elastic + c_spring * rel;
            for a in 0..2 {
                force[2 * i + a] += f * dir[a];
                force[2 * j + a] -= f * dir[a];
            }
        }
        for i in (0..n).filter(|&i| deformable[i]) {
            let pen = cfg.wall_y - x[2 * i + 1];
            if pen > 0.0 {
                force[2 * i + 1] += (k_wall * pen - c_wall * v[2 * i + 1]).max(0.0);
            }
        }
        for i in (0..n).filter(|&i| deformable[i]) {
            for a in 0..2 {
                v[2 * i + a] += dt * force[2 * i + a] / m;
                x[2 * i + a] += dt * v[2 * i + a];
            }
        }
        if x.iter().chain(v.iter()).any(|c| !c.is_finite() || c.abs() > cfg.bound) {
            return Err(Error::Oracle(format!(
                "impact simulation unstable at fine step {step}: dt {dt:e}, spring stiffness {:.4e}, wall stiffness {k_wall:.4e}",
                mat.stiffness
            )));
        }
        if step % cfg.substeps == 0 {
            frames.push(state.clone());
        }
    }
    let traj = Trajectory {
        mesh,
        kappa: cfg.kappa,
        dt: cfg.dt * cfg.substeps as f64,
        frames,
    };
    traj.validate()?;
    Ok(traj)
}

/// Graph settings matching the impact oracle.
pub fn impact_graph_config(cfg: &OracleConfig) -> GraphConfig {
    GraphConfig {
        contact_radius: Some(0.9 * cfg.spacing),
        tied_k: cfg.tied_k,
        n_frequencies: 8,
    }
}

fn draw_kappa(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let k = rng.random_range(0.1..0.3);
        if k > 0.1 {
            return k;
        }
    }
}

/// Runs `job` for every index on up to `workers` threads; results keep index
/// order.
pub fn run_indexed<T: Send>(
    count: usize,
    workers: usize,
    job: impl Fn(usize) -> Result<T, Error> + Sync,
) -> Result<Vec<T>, Error> {
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(&job).collect();
    }
    let job = &job;
    let mut slots: Vec<Option<Result<T, Error>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w..count).step_by(workers).map(|i| (i, job(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every index ran")).collect()
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn write_dataset(
    out: &Path,
    kind: &str,
    graph: GraphConfig,
    config: serde_json::Value,
    n_train: usize,
    n_test: usize,
    seed: u64,
    workers: usize,
    make: impl Fn(u64) -> Result<Trajectory, Error> + Sync,
) -> Result<Manifest, Error> {
    if n_train == 0 || n_test == 0 {
        return Err(ConfigError::Invalid("dataset needs at least one train and one test trajectory".into()).into());
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(Split, usize, u64)> = (0..n_train)
        .map(|i| (Split::Train, i))
        .chain((0..n_test).map(|i| (Split::Test, i)))
        .map(|(s, i)| (s, i, master.next_u64()))
        .collect();
    let entries = run_indexed(plan.len(), workers, |k| {
        let (split, i, traj_seed) = plan[k];
        let traj = make(traj_seed)?;
        let name = format!("{}_{i:03}.mgnt", split_name(split));
        traj.write(&out.join(&name))?;
        Ok(ManifestEntry {
            path: name,
            split,
            seed: traj_seed,
            kappa: traj.kappa,
        })
    })?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        kind: kind.into(),
        graph,
        config,
        trajectories: entries,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Impact trajectories with `kappa` drawn uniformly from (0.1, 0.3).
pub fn gen_dataset(
    out: &Path,
    n_train: usize,
    n_test: usize,
    base: &OracleConfig,
    seed: u64,
    workers: usize,
) -> Result<Manifest, Error> {
    base.validate()?;
    write_dataset(
        out,
        "impact",
        impact_graph_config(base),
        serde_json::to_value(base)?,
        n_train,
        n_test,
        seed,
        workers,
        |s| {
            let cfg = OracleConfig {
                kappa: draw_kappa(&mut ChaCha8Rng::seed_from_u64(s)),
                ..base.clone()
            };
            simulate_impact(&cfg)
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongRangeConfig {
    pub n_nodes: usize,
    pub spacing: f64,
    pub stiffness: f64,
    /// Ground-spring stiffness as a fraction of the chain stiffness.
    pub foundation_ratio: f64,
    pub frames: usize,
    pub drive_amplitude: f64,
    /// Relative residual at which the relaxation stops.
    pub tolerance: f64,
}

impl Default for LongRangeConfig {
    fn default() -> Self {
        Self {
            n_nodes: 400,
            spacing: 1.0,
            stiffness: 1.0,
            foundation_ratio: 1.0 / 40_000.0,
            frames: 40,
            drive_amplitude: 1.0,
            tolerance: 1e-13,
        }
    }
}

impl LongRangeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_nodes < 100 {
            return Err(ConfigError::Invalid(format!("chain length {} is below 100", self.n_nodes)));
        }
        if !(self.spacing > 0.0 && self.stiffness > 0.0 && self.foundation_ratio > 0.0 && self.tolerance > 0.0) {
            return Err(ConfigError::Invalid("chain spacing, stiffnesses and tolerance must be positive".into()));
        }
        if self.frames < 2 {
            return Err(ConfigError::Invalid("chain needs at least 2 frames".into()));
        }
        Ok(())
    }
}

/// Tridiagonal stiffness of the free nodes `1..n` of the chain:
/// returns `(diagonal, off-diagonal)`.
pub fn chain_matrix(cfg: &LongRangeConfig) -> (Vec<f64>, Vec<f64>) {
    let m = cfg.n_nodes - 1;
    let k = cfg.stiffness;
    let kf = cfg.foundation_ratio * k;
    let diag = (0..m).map(|i| if i + 1 == m { k + kf } else { 2.0 * k + kf }).collect();
    (diag, vec![-k; m - 1])
}

/// Static displacement of every chain node with node 0 held at `drive`,
/// by conjugate gradients.
pub fn relax_chain(cfg: &LongRangeConfig, drive: f64) -> Result<Vec<f64>, Error> {
    let (diag, off) = chain_matrix(cfg);
    let m = diag.len();
    let apply = |x: &[f64], y: &mut [f64]| {
        for i in 0..m {
            let mut s = diag[i] * x[i];
            if i > 0 {
                s += off[i - 1] * x[i - 1];
            }
            if i + 1 < m {
                s += off[i] * x[i + 1];
            }
            y[i] = s;
        }
    };
    let mut b = vec![0.0; m];
    b[0] = cfg.stiffness * drive;
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut u = vec![0.0; cfg.n_nodes];
    u[0] = drive;
    if bnorm == 0.0 {
        return Ok(u);
    }
    let mut x = vec![0.0; m];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let max_iter = 20 * m;
    let mut it = 0;
    while rr.sqrt() > cfg.tolerance * bnorm {
        if it == max_iter {
            return Err(Error::Oracle(format!(
                "chain relaxation did not converge in {max_iter} iterations (relative residual {:.3e})",
                rr.sqrt() / bnorm
            )));
        }
        apply(&p, &mut ap);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        it += 1;
    }
    u[1..].copy_from_slice(&x);
    Ok(u)
}

pub fn chain_mesh(cfg: &LongRangeConfig) -> Result<Mesh, Error> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let x = (0..n).flat_map(|i| [i as f64 * cfg.spacing, 0.0]).collect();
    let elements = (0..n - 1).map(|i| vec![i, i + 1]).collect();
    let mut types = vec![NodeType::Deformable; n];
    types[0] = NodeType::Actuator;
    Ok(Mesh::new(2, x, elements, types, vec![0; n])?)
}

/// Frame `t` holds node 0 at the new drive `d_t` while the rest of the
/// chain is relaxed to `d_{t-1}`; the next frame's interior therefore
/// depends on the actuator state across the whole chain.
pub fn long_range_trajectory(cfg: &LongRangeConfig, seed: u64) -> Result<Trajectory, Error> {
    let mesh = chain_mesh(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drives: Vec<f64> = (0..cfg.frames)
        .map(|_| rng.random_range(-cfg.drive_amplitude..=cfg.drive_amplitude))
        .collect();
    let n = cfg.n_nodes;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut previous = vec![0.0; n];
    for &d in &drives {
        let mut f = FrameState::at_rest(&mesh);
        for i in 1..n {
            f.positions[2 * i] += previous[i];
        }
        f.positions[0] += d;
        frames.push(f);
        previous = relax_chain(cfg, d)?;
    }
    Ok(Trajectory {
        mesh,
        kappa: cfg.stiffness,
        dt: 1.0,
        frames,
    })
}

pub fn long_range_graph_config(cfg: &LongRangeConfig) -> GraphConfig {
    GraphConfig {
        contact_radius: Some(0.5 * cfg.spacing),
        tied_k: 1,
        n_frequencies: 8,
    }
}

pub fn long_range_benchmark(
    out: &Path,
    n_train: usize,
    n_test: usize,
    cfg: &LongRangeConfig,
    seed: u64,
    workers: usize,
) -> Result<Manifest, Error> {
    cfg.validate()?;
    write_dataset(
        out,
        "long_range",
        long_range_graph_config(cfg),
        serde_json::to_value(cfg)?,
        n_train,
        n_test,
        seed,
        workers,
        |s| long_range_trajectory(cfg, s),
    )
}
