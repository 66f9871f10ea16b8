//! Browser bindings: an impact trajectory with its contact graph and the
//! slice weights of an untrained network.

use mgnt_core::graph::{build_mesh_edges, detect_contact_edges, GraphBuilder};
use mgnt_core::model::{Model, ModelConfig};
use mgnt_core::normalize::Normalizer;
use mgnt_core::synthetic::{impact_graph_config, simulate_impact, OracleConfig};
use mgnt_core::trajectory::Trajectory;
use mgnt_core::Error;
use mgnt_core::mesh::FrameState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Tokens of the demo network.
pub const DEMO_TOKENS: usize = 6;

/// Plain-Rust state behind [`ImpactDemo`].
pub struct Demo {
    traj: Trajectory,
    builder: GraphBuilder,
    normalizer: Normalizer,
    mesh_edges: Vec<u32>,
}

impl Demo {
    pub fn new(kappa: f64, frames: usize) -> Result<Self, Error> {
        let cfg = OracleConfig {
            kappa,
            frames,
            ..Default::default()
        };
        let traj = simulate_impact(&cfg)?;
        let builder = GraphBuilder::new(traj.mesh.clone(), kappa, &impact_graph_config(&cfg))?;
        let normalizer = Normalizer::fit([(&builder, &traj)]);
        let mesh_edges = build_mesh_edges(&traj.mesh)?
            .into_iter()
            .filter(|&(i, j)| i < j)
            .flat_map(|(i, j)| [i as u32, j as u32])
            .collect();
        Ok(Self {
            traj,
            builder,
            normalizer,
            mesh_edges,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.traj.len()
    }

    fn frame(&self, t: usize) -> Result<&FrameState, Error> {
        self.traj.frames.get(t).ok_or_else(|| {
            Error::Contract(format!("frame {t} out of range ({} frames)", self.traj.len()))
        })
    }

    pub fn positions(&self, t: usize) -> Result<Vec<f64>, Error> {
        Ok(self.frame(t)?.positions.clone())
    }

    pub fn hardening(&self, t: usize) -> Result<Vec<f64>, Error> {
        Ok(self.frame(t)?.hardening.clone())
    }

    /// Undirected contact pairs at frame `t` for radius `r`, flattened.
    pub fn contact_edges(&self, t: usize, radius: f64) -> Result<Vec<u32>, Error> {
        if !(radius > 0.0) {
            return Err(Error::Contract(format!("contact radius must be positive (got {radius})")));
        }
        let mesh = &self.traj.mesh;
        let pairs = detect_contact_edges(&self.frame(t)?.positions, mesh.dim(), radius, self.builder.excluded());
        Ok(pairs
            .into_iter()
            .filter(|&(i, j)| i < j)
            .flat_map(|(i, j)| [i as u32, j as u32])
            .collect())
    }

    /// Slice weights `N×P` (row-major) of the first block of a freshly
    /// initialized network at frame `t`, with Gumbel noise when `gumbel_seed`
    /// is given.
    pub fn slice_weights(&self, t: usize, tau0: f64, gumbel_seed: Option<u64>) -> Result<Vec<f64>, Error> {
        let mut cfg = ModelConfig::mgnt(self.builder.dims(), 16);
        cfg.n_tokens = DEMO_TOKENS;
        cfg.n_heads = 2;
        cfg.transformer_dims = [16, 8, 16];
        cfg.tau0 = tau0;
        let model = Model::new(cfg, 7)?;
        let sample = self.normalizer.normalize_sample(&self.builder.build(self.frame(t)?));
        let tape = mgnt_core::autodiff::Tape::new();
        let p = model.params().on_tape(&tape, false);
        let mut rng = gumbel_seed.map(ChaCha8Rng::seed_from_u64);
        let out = model.forward(&p, &sample, rng.as_mut())?;
        Ok(out.blocks[0].weights.data().to_vec())
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One impact trajectory for the page.
#[wasm_bindgen]
pub struct ImpactDemo {
    inner: Demo,
}

#[wasm_bindgen]
impl ImpactDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(kappa: f64, frames: usize) -> Result<ImpactDemo, JsError> {
        Ok(Self {
            inner: Demo::new(kappa, frames).map_err(js)?,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    pub fn n_nodes(&self) -> usize {
        self.inner.traj.mesh.n_nodes()
    }

    pub fn n_tokens(&self) -> usize {
        DEMO_TOKENS
    }

    /// 1 for lattice nodes, 0 for wall nodes.
    pub fn deformable(&self) -> Vec<u8> {
        self.inner.traj.mesh.deformable_mask().into_iter().map(u8::from).collect()
    }

    pub fn mesh_edges(&self) -> Vec<u32> {
        self.inner.mesh_edges.clone()
    }

    pub fn positions(&self, t: usize) -> Result<Vec<f64>, JsError> {
        self.inner.positions(t).map_err(js)
    }

    pub fn hardening(&self, t: usize) -> Result<Vec<f64>, JsError> {
        self.inner.hardening(t).map_err(js)
    }

    pub fn contact_edges(&self, t: usize, radius: f64) -> Result<Vec<u32>, JsError> {
        self.inner.contact_edges(t, radius).map_err(js)
    }

    /// `gumbel_seed < 0` disables the noise.
    pub fn slice_weights(&self, t: usize, tau0: f64, gumbel_seed: f64) -> Result<Vec<f64>, JsError> {
        let seed = (gumbel_seed >= 0.0).then_some(gumbel_seed as u64);
        self.inner.slice_weights(t, tau0, seed).map_err(js)
    }
}
