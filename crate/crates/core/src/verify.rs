//! Fast invariant suite shared by the `verify` command and the acceptance
//! tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpRecord, Tape, Var};
use crate::error::{Error, TensorError};
use crate::gradcheck::{grad_check, grad_check_coords, GradCheckOptions, GradCheckReport};
use crate::graph::{detect_contact_edges, detect_contact_edges_brute, FeatureDims, GraphBuilder};
use crate::mesh::FrameState;
use crate::model::{Model, ModelConfig, TargetMode};
use crate::normalize::{Normalizer, OutputHead};
use crate::synthetic::{impact_graph_config, simulate_impact, OracleConfig};
use crate::tensor::Tensor;
use crate::training::{make_batch, sample_loss, LossMask, TrainingSet};

type Probe = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>>;

/// Random values kept at least `gap` away from `kink`.
fn away_from(rows: usize, cols: usize, kink: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(rows, cols, 2.0, rng);
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + gap.copysign(*v - kink) * 2.0;
        }
    }
    t
}

/// Contracts `out` with fixed pseudo-random weights so every output entry
/// reaches the scalar.
fn contract<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let [r, c] = out.shape();
    let w = Tensor::uniform(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out.mul(out.tape().constant(w))?.sum_all())
}

/// One randomized case per call: `(name, inputs, function)`.
fn primitive_case(kind: usize, rng: &mut ChaCha8Rng) -> (&'static str, Vec<Tensor>, Probe) {
    let r = rng.random_range(1..6);
    let c = rng.random_range(1..6);
    let k = rng.random_range(1..6);
    let s: u64 = rng.random();
    let u = |rows, cols, rng: &mut ChaCha8Rng| Tensor::uniform(rows, cols, 2.0, rng);
    match kind {
        0 => ("matmul", vec![u(r, k, rng), u(k, c, rng)], Box::new(move |_, v| contract(v[0].matmul(v[1])?, s))),
        1 => ("add", vec![u(r, c, rng), u(r, c, rng)], Box::new(move |_, v| contract(v[0].add(v[1])?, s))),
        2 => ("sub", vec![u(r, c, rng), u(r, c, rng)], Box::new(move |_, v| contract(v[0].sub(v[1])?, s))),
        3 => ("mul", vec![u(r, c, rng), u(r, c, rng)], Box::new(move |_, v| contract(v[0].mul(v[1])?, s))),
        4 => ("add_row", vec![u(r, c, rng), u(1, c, rng)], Box::new(move |_, v| contract(v[0].add_row(v[1])?, s))),
        5 => {
            let f = rng.random_range(-3.0..3.0);
            ("scale", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].scale(f), s)))
        }
        6 => {
            let f = rng.random_range(-3.0..3.0);
            ("add_scalar", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].add_scalar(f), s)))
        }
        7 => {
            let slope = rng.random_range(0.0..1.0);
            let x = away_from(r, c, 0.0, 0.05, rng);
            ("leaky_relu", vec![x], Box::new(move |_, v| contract(v[0].leaky_relu(slope)?, s)))
        }
        8 => {
            let lo = rng.random_range(-1.0..1.0);
            let x = away_from(r, c, lo, 0.05, rng);
            ("clamp_min", vec![x], Box::new(move |_, v| contract(v[0].clamp_min(lo), s)))
        }
        9 => ("softplus", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].softplus(), s))),
        10 => {
            // Two columns always standardize to +-1, leaving only eps.
            let c = c.max(3);
            (
                "layer_norm",
                vec![u(r, c, rng), u(1, c, rng), u(1, c, rng)],
                Box::new(move |_, v| contract(v[0].layer_norm(v[1], v[2], 1e-5)?, s)),
            )
        }
        11 => ("softmax_rows", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].softmax(1)?, s))),
        12 => ("softmax_cols", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].softmax(0)?, s))),
        13 => {
            let n = rng.random_range(1..5);
            let ids: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
            ("segment_sum", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].segment_sum(&ids, n)?, s)))
        }
        14 => {
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
            ("gather", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].gather(&idx)?, s)))
        }
        15 => (
            "concat_cols",
            vec![u(r, c, rng), u(r, k, rng), u(r, 1, rng)],
            Box::new(move |_, v| contract(Var::concat_cols(v)?, s)),
        ),
        16 => {
            let start = rng.random_range(0..c);
            let width = rng.random_range(1..=c - start);
            ("slice_cols", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].slice_cols(start, width)?, s)))
        }
        17 => ("transpose", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].transpose(), s))),
        18 => ("sum_all", vec![u(r, c, rng)], Box::new(move |_, v| Ok(v[0].sum_all().scale(0.7)))),
        19 => ("col_sum", vec![u(r, c, rng)], Box::new(move |_, v| contract(v[0].col_sum(), s))),
        20 => {
            let mut d = Tensor::uniform(r, 1, 0.75, rng);
            d.data_mut().iter_mut().for_each(|x| *x += 1.25);
            ("div_col", vec![u(r, c, rng), d], Box::new(move |_, v| contract(v[0].div_col(v[1])?, s)))
        }
        _ => ("mul_col", vec![u(r, c, rng), u(r, 1, rng)], Box::new(move |_, v| contract(v[0].mul_col(v[1])?, s))),
    }
}

pub const N_PRIMITIVES: usize = 22;

/// Square with a deliberately wrong derivative (`3x` instead of `2x`).
fn sabotaged_case(rng: &mut ChaCha8Rng) -> (&'static str, Vec<Tensor>, Probe) {
    let x = Tensor::uniform(3, 2, 2.0, rng);
    (
        "sabotaged_square",
        vec![x],
        Box::new(|tape, v| {
            let val = v[0].value().map(|a| a * a);
            let sq = tape.custom(&[v[0]], val, |g, ins, _| {
                let mut d = ins[0].map(|a| 3.0 * a);
                d.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a *= b);
                vec![d]
            });
            Ok(sq.sum_all())
        }),
    )
}

/// Worst report per primitive over `cases` randomized shapes each.
pub fn primitive_gradients(seed: u64, cases: usize, sabotage: bool) -> Result<Vec<(String, GradCheckReport)>, Error> {
    primitive_gradients_with(seed, cases, sabotage, GradCheckOptions::default())
}

pub fn primitive_gradients_with(
    seed: u64,
    cases: usize,
    sabotage: bool,
    opts: GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let kinds = N_PRIMITIVES + usize::from(sabotage);
    for kind in 0..kinds {
        let mut worst: Option<(String, GradCheckReport)> = None;
        for _ in 0..cases {
            let (name, inputs, f) = if kind == N_PRIMITIVES {
                sabotaged_case(&mut rng)
            } else {
                primitive_case(kind, &mut rng)
            };
            let r = grad_check(f, &inputs, opts)?;
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.1.max_rel_error) {
                worst = Some((name.to_string(), r));
            }
        }
        out.extend(worst);
    }
    Ok(out)
}

/// Lattice-on-wall setup with at most 20 nodes.
pub fn small_impact() -> OracleConfig {
    OracleConfig {
        rows: 3,
        cols: 3,
        split_row: 1,
        wall_x: [0.0, 2.0],
        wall_spacing: 1.0,
        frames: 24,
        ..Default::default()
    }
}

/// Compact MGN-T sized for quick checks.
pub fn tiny_config(dims: FeatureDims, latent: usize) -> ModelConfig {
    ModelConfig {
        n_tokens: 4,
        n_heads: 2,
        transformer_dims: [8, 4, 8],
        ..ModelConfig::mgnt(dims, latent)
    }
}

/// Gradient of the one-step loss through the full network against central
/// differences, on a frame where contact is active.
pub fn composite_gradient(seed: u64) -> Result<GradCheckReport, Error> {
    composite_gradient_with(
        seed,
        GradCheckOptions {
            step: 5e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        },
    )
}

pub fn composite_gradient_with(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport, Error> {
    let cfg = small_impact();
    let traj = simulate_impact(&cfg)?;
    let set = TrainingSet::new(vec![traj], &impact_graph_config(&cfg))?;
    let model = Model::new(tiny_config(set.items[0].builder.dims(), 8), seed)?;
    let head = OutputHead::new(&set.normalizer, TargetMode::Absolute, true);
    let t = (0..23)
        .max_by_key(|&t| set.items[0].builder.contact_edges(&set.items[0].trajectory.frames[t].positions).len())
        .unwrap_or(0);
    let item = make_batch::<ChaCha8Rng>(&set, &head, &[(0, t)], LossMask::Deformable, None)?.remove(0);
    let target = item.masked_target();
    let wrap = |e: Error| TensorError::NonFinite(e.to_string());
    let probe: Probe = {
        let (model, head, item) = (model.clone(), head.clone(), item.clone());
        Box::new(move |_, v| {
            let out = model.forward::<ChaCha8Rng>(v, &item.sample, None).map_err(wrap)?;
            let pred = head.normalized_prediction(out.output, &item.alpha_offset)?;
            sample_loss(pred, &target, &item.rows).map_err(wrap)
        })
    };
    let inputs = model.params().values().to_vec();
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    Ok(grad_check_coords(probe, &inputs, &coords, opts)?)
}

/// `(max |row sum - 1|, min entry)` of slice weights for `n` random
/// standardized nodes,
/// with and without Gumbel noise.
pub fn slice_normalization(n: usize, seed: u64) -> Result<(f64, f64), Error> {
    let dims = FeatureDims::for_dim(2, 8);
    let model = Model::new(ModelConfig::mgnt(dims, 32), seed)?;
    let width = model.config().transformer_dims[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // The slice sees layer-normalized rows.
    let mut x = Tensor::uniform(n, width, 1.0, &mut rng);
    for i in 0..n {
        let row = x.row_mut(i);
        let m = row.iter().sum::<f64>() / width as f64;
        let sd = (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / width as f64).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
    let (mut dev, mut min) = (0.0f64, f64::INFINITY);
    for noisy in [false, true] {
        let tape = Tape::new();
        let p = model.params().on_tape(&tape, false);
        let g = noisy.then_some(&mut rng);
        let (_, w, _) = model.slice(&p, 0, tape.constant(x.clone()), g)?;
        let w = w.value();
        for i in 0..n {
            dev = dev.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
            min = min.min(w.row(i).iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }
    Ok((dev, min))
}

/// Roughly 100-node impact sample at a frame with active contact.
pub fn equivariance_setup() -> Result<(OracleConfig, FrameState), Error> {
    let cfg = OracleConfig {
        rows: 8,
        cols: 9,
        wall_x: [-2.0, 9.2],
        wall_spacing: 0.4,
        frames: 22,
        ..Default::default()
    };
    let t = simulate_impact(&cfg)?;
    let frame = t.frames[21].clone();
    Ok((cfg, frame))
}

/// Largest output deviation under a random node relabeling and under a
/// random rigid translation of the whole scene, for a randomly initialized
/// model in eval mode.
pub fn equivariance(seed: u64) -> Result<(f64, f64, usize), Error> {
    let (cfg, frame) = equivariance_setup()?;
    let traj = simulate_impact(&OracleConfig { frames: 2, ..cfg.clone() })?;
    let mesh = traj.mesh.clone();
    let n = mesh.n_nodes();
    let graph = impact_graph_config(&cfg);
    let builder = GraphBuilder::new(mesh.clone(), 0.2, &graph)?;
    let norm = Normalizer::fit([(&builder, &traj)]);
    let model = Model::new(tiny_config(builder.dims(), 16), seed)?;
    let run = |b: &GraphBuilder, f: &FrameState| -> Result<Tensor, Error> {
        Ok(model.predict(&norm.normalize_sample(&b.build(f)))?.0)
    };
    let base = run(&builder, &frame)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pb = GraphBuilder::new(mesh.permuted(&perm), 0.2, &graph)?;
    let out = run(&pb, &frame.permuted(&perm, 2))?;
    let perm_dev = (0..n)
        .map(|k| {
            out.row(k)
                .iter()
                .zip(base.row(perm[k]))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        })
        .fold(0.0, f64::max);

    let shift = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    let moved = |v: &[f64]| -> Vec<f64> { v.chunks(2).flat_map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect() };
    let tmesh = crate::mesh::Mesh::new(
        2,
        moved(mesh.reference()),
        mesh.elements().to_vec(),
        mesh.node_types().to_vec(),
        mesh.components().to_vec(),
    )?;
    let tb = GraphBuilder::new(tmesh, 0.2, &graph)?;
    let tframe = FrameState {
        positions: moved(&frame.positions),
        ..frame.clone()
    };
    let trans_dev = run(&tb, &tframe)?.max_abs_diff(&base);
    Ok((perm_dev, trans_dev, builder.contact_edges(&frame.positions).len()))
}

/// Spatial-hash contact detection agrees with the all-pairs scan on random
/// point clouds.
pub fn contact_equivalence(seed: u64, trials: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).all(|_| {
        let dim = rng.random_range(2..=3);
        let n = rng.random_range(2..80);
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = rng.random_range(0.2..1.5);
        let none = Default::default();
        detect_contact_edges(&pts, dim, r, &none) == detect_contact_edges_brute(&pts, dim, r, &none)
    })
}

/// Op records of slice, token attention and deslice at `n` nodes and `p`
/// tokens, split as `(slice and deslice, attention)`.
pub fn token_op_counts(n: usize, p: usize) -> Result<(Vec<OpRecord>, Vec<OpRecord>), Error> {
    let dims = FeatureDims::for_dim(2, 8);
    let mut cfg = ModelConfig::mgnt(dims, 32);
    cfg.n_tokens = p;
    let model = Model::new(cfg, 0)?;
    let width = model.config().transformer_dims[0];
    let tape = Tape::new();
    let params = model.params().on_tape(&tape, false);
    let x = tape.constant(Tensor::uniform(n, width, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let start = tape.len();
    let (z, w, _) = model.slice::<ChaCha8Rng>(&params, 0, x, None)?;
    let mid = tape.len();
    let z2 = model.token_attention(&params, 0, z)?;
    let end = tape.len();
    crate::model::deslice(z2, w)?;
    let mut outer = tape.op_log(start);
    let attention: Vec<OpRecord> = outer.drain(mid - start..end - start).collect();
    Ok((outer, attention))
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Adds a primitive with a wrong gradient rule; the suite must then fail.
    pub sabotage: bool,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String), Error>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(opts: VerifyOptions) -> Vec<Check> {
    let seed = opts.seed;
    let mut checks = Vec::new();
    checks.push(timed("primitive gradients", || {
        let reports = primitive_gradients(seed, 5, opts.sabotage)?;
        let bad: Vec<String> = reports
            .iter()
            .filter(|(_, r)| !r.passed())
            .map(|(n, r)| format!("{n} ({:.1e})", r.max_rel_error))
            .collect();
        let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
        Ok(if bad.is_empty() {
            (true, format!("{} primitives x 5 shapes, worst rel err {worst:.1e}", reports.len()))
        } else {
            (false, format!("failed: {}", bad.join(", ")))
        })
    }));
    checks.push(timed("loss-forward gradient", || {
        let r = composite_gradient(seed)?;
        Ok((r.passed(), format!("{} coords, worst rel err {:.1e}", r.coordinates, r.max_rel_error)))
    }));
    checks.push(timed("slice weight normalization", || {
        let (dev, min) = slice_normalization(1000, seed)?;
        Ok((dev < 1e-9 && min > 0.0, format!("max |row sum - 1| {dev:.1e}, min weight {min:.1e}")))
    }));
    checks.push(timed("permutation and translation", || {
        let (p, t, contacts) = equivariance(seed)?;
        Ok((p < 1e-8 && t < 1e-8, format!("perm dev {p:.1e}, shift dev {t:.1e}, {contacts} contacts")))
    }));
    checks.push(timed("contact hash vs brute force", || {
        let ok = contact_equivalence(seed, 50);
        Ok((ok, "50 random clouds".into()))
    }));
    checks.push(timed("token cost independent of N", || {
        let (_, a) = token_op_counts(500, 32)?;
        let (_, b) = token_op_counts(2000, 32)?;
        Ok((a == b, format!("{} attention ops", a.len())))
    }));
    checks
}
