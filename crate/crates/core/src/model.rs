//! The MGN-T network: encoders, pre-processing message passing,
//! physics-attention transformer blocks, refinement message passing and a
//! decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container::Container;
use crate::error::{ConfigError, Error, TensorError};
use crate::graph::{FeatureDims, GraphSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Next-step `(u, v, alpha)`.
    Absolute,
    /// Next-step change of `(u, v, alpha)`.
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub mpnn_pre: usize,
    pub mpnn_refine: usize,
    pub n_transformer_blocks: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    /// Block width, attention inner width, feed-forward hidden width.
    pub transformer_dims: [usize; 3],
    pub tau0: f64,
    pub tau_min: f64,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    pub target_mode: TargetMode,
    /// Predict the hardening increment through a softplus so it is never
    /// negative.
    pub monotone_hardening: bool,
    pub dims: FeatureDims,
}

impl ModelConfig {
    /// 2+2 message passing, two blocks of 4 heads over 32 tokens, widths 64-32-64.
    pub fn mgnt(dims: FeatureDims, latent_dim: usize) -> Self {
        Self {
            latent_dim,
            mpnn_pre: 2,
            mpnn_refine: 2,
            n_transformer_blocks: 2,
            n_heads: 4,
            n_tokens: 32,
            transformer_dims: [64, 32, 64],
            tau0: 0.5,
            tau_min: 0.01,
            leaky_slope: 0.01,
            layer_norm_eps: 1e-5,
            target_mode: TargetMode::Absolute,
            monotone_hardening: true,
            dims,
        }
    }

    /// Deep message-passing stack without attention.
    pub fn mgn_baseline(dims: FeatureDims) -> Self {
        Self {
            mpnn_pre: 15,
            mpnn_refine: 0,
            n_transformer_blocks: 0,
            ..Self::mgnt(dims, 128)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.transformer_dims[1] / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("n_heads", self.n_heads),
            ("n_tokens", self.n_tokens),
            ("transformer_dims[0]", self.transformer_dims[0]),
            ("transformer_dims[1]", self.transformer_dims[1]),
            ("transformer_dims[2]", self.transformer_dims[2]),
            ("dims.node", self.dims.node),
            ("dims.mesh_edge", self.dims.mesh_edge),
            ("dims.contact_edge", self.dims.contact_edge),
            ("dims.output", self.dims.output),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("model.{name} must be positive")));
            }
        }
        if self.transformer_dims[1] % self.n_heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "attention width {} is not divisible by n_heads {}",
                self.transformer_dims[1], self.n_heads
            )));
        }
        if !(self.tau0 > 0.0 && self.tau_min > 0.0) {
            return Err(ConfigError::Invalid("tau0 and tau_min must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ConfigError::Invalid("leaky_slope must lie in (0, 1)".into()));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(ConfigError::Invalid("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut shapes = ShapeOnly::default();
        Layout::build(self, &mut shapes);
        shapes.total
    }
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`; differentiable when `trainable`.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.values
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

trait Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize;
}

#[derive(Clone, Copy)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Default)]
struct ShapeOnly {
    count: usize,
    total: usize,
}

impl Registry for ShapeOnly {
    fn add(&mut self, _: String, rows: usize, cols: usize, _: Init) -> usize {
        self.total += rows * cols;
        self.count += 1;
        self.count - 1
    }
}

struct Initializer<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Registry for Initializer<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let t = match init {
            Init::Uniform(bound) => Tensor::uniform(rows, cols, bound, &mut self.rng),
            Init::Ones => Tensor::full(rows, cols, 1.0),
            Init::Zeros => Tensor::zeros(rows, cols),
        };
        self.store.names.push(name);
        self.store.values.push(t);
        self.store.values.len() - 1
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new(r: &mut dyn Registry, name: &str, fan_in: usize, fan_out: usize, scale: f64) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        Self {
            w: r.add(format!("{name}.w"), fan_in, fan_out, Init::Uniform(bound)),
            b: r.add(format!("{name}.b"), 1, fan_out, Init::Uniform(bound)),
        }
    }

    fn apply<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(p[self.w])?.add_row(p[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

impl Norm {
    fn new(r: &mut dyn Registry, name: &str, width: usize) -> Self {
        Self {
            g: r.add(format!("{name}.gain"), 1, width, Init::Ones),
            b: r.add(format!("{name}.bias"), 1, width, Init::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Linear,
    l2: Linear,
    norm: Option<Norm>,
}

impl Mlp {
    fn new(r: &mut dyn Registry, name: &str, input: usize, hidden: usize, output: usize, norm: bool, last_scale: f64) -> Self {
        Self {
            l1: Linear::new(r, &format!("{name}.l1"), input, hidden, 1.0),
            l2: Linear::new(r, &format!("{name}.l2"), hidden, output, last_scale),
            norm: norm.then(|| Norm::new(r, &format!("{name}.norm"), output)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MpnnLayer {
    edge: Mlp,
    node: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    input: Linear,
    norm1: Norm,
    slice_logits: Linear,
    slice_tau: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    attn_out: Linear,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    output: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_node: Mlp,
    enc_mesh: Mlp,
    enc_contact: Mlp,
    pre: Vec<MpnnLayer>,
    blocks: Vec<Block>,
    refine: Vec<MpnnLayer>,
    decoder: Mlp,
}

impl Layout {
    fn build(c: &ModelConfig, r: &mut dyn Registry) -> Self {
        let l = c.latent_dim;
        let [dm, di, df] = c.transformer_dims;
        let mpnn = |r: &mut dyn Registry, name: String| MpnnLayer {
            edge: Mlp::new(r, &format!("{name}.edge"), 3 * l, l, l, true, 1.0),
            node: Mlp::new(r, &format!("{name}.node"), 3 * l, l, l, true, 1.0),
        };
        let enc_node = Mlp::new(r, "encoder.node", c.dims.node, l, l, true, 1.0);
        let enc_mesh = Mlp::new(r, "encoder.mesh", c.dims.mesh_edge, l, l, true, 1.0);
        let enc_contact = Mlp::new(r, "encoder.contact", c.dims.contact_edge, l, l, true, 1.0);
        let pre = (0..c.mpnn_pre).map(|i| mpnn(r, format!("pre.{i}"))).collect();
        let blocks = (0..c.n_transformer_blocks)
            .map(|i| {
                let n = format!("block.{i}");
                Block {
                    input: Linear::new(r, &format!("{n}.input"), l + c.dims.positional, dm, 1.0),
                    norm1: Norm::new(r, &format!("{n}.norm1"), dm),
                    slice_logits: Linear::new(r, &format!("{n}.slice_logits"), dm, c.n_tokens, 1.0),
                    slice_tau: Linear::new(r, &format!("{n}.slice_tau"), dm, 1, 0.1),
                    q: Linear::new(r, &format!("{n}.q"), dm, di, 1.0),
                    k: Linear::new(r, &format!("{n}.k"), dm, di, 1.0),
                    v: Linear::new(r, &format!("{n}.v"), dm, di, 1.0),
                    attn_out: Linear::new(r, &format!("{n}.attn_out"), di, dm, 1.0),
                    norm2: Norm::new(r, &format!("{n}.norm2"), dm),
                    ffn1: Linear::new(r, &format!("{n}.ffn1"), dm, df, 1.0),
                    ffn2: Linear::new(r, &format!("{n}.ffn2"), df, dm, 1.0),
                    output: Linear::new(r, &format!("{n}.output"), dm, l, 1.0),
                }
            })
            .collect();
        let refine = (0..c.mpnn_refine).map(|i| mpnn(r, format!("refine.{i}"))).collect();
        let decoder = Mlp::new(r, "decoder", l, l, c.dims.output, false, 0.1);
        Self {
            enc_node,
            enc_mesh,
            enc_contact,
            pre,
            blocks,
            refine,
            decoder,
        }
    }
}

/// Values retained from one transformer block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Slice weights `N×P`.
    pub weights: Tensor,
    pub temperature: Tensor,
}

pub struct ForwardOutput<'t> {
    /// Network output `N×output_dim` in normalized target space.
    pub output: Var<'t>,
    pub blocks: Vec<BlockTrace>,
}

/// Node and edge latents during processing.
pub struct Latents<'t> {
    pub nodes: Var<'t>,
    pub mesh: Var<'t>,
    pub contact: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn config_err(msg: String) -> Error {
    ConfigError::Invalid(msg).into()
}

/// Gumbel noise `-ln(-ln(e))` with `e` uniform on the open unit interval.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        let e: f64 = rng.sample(rand_distr::Open01);
        *v = -(-e.ln()).ln();
    }
    t
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut params = ParamStore::default();
        let layout = {
            let mut init = Initializer {
                store: &mut params,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            Layout::build(&config, &mut init)
        };
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn mlp<'t>(&self, p: &[Var<'t>], m: &Mlp, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = m.l1.apply(p, x)?.leaky_relu(self.config.leaky_slope)?;
        let y = m.l2.apply(p, h)?;
        match m.norm {
            Some(n) => y.layer_norm(p[n.g], p[n.b], self.config.layer_norm_eps),
            None => Ok(y),
        }
    }

    fn check_dims(&self, s: &GraphSample) -> Result<(), Error> {
        let d = &self.config.dims;
        let checks = [
            ("node features", s.node_features.cols(), d.node),
            ("mesh-edge features", s.mesh_features.cols(), d.mesh_edge),
            ("contact-edge features", s.contact_features.cols(), d.contact_edge),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(config_err(format!("{what} have width {got}, model expects {want}")));
            }
        }
        if self.config.n_transformer_blocks > 0 && s.positional.cols() != d.positional {
            return Err(config_err(format!(
                "positional encoding has width {}, model expects {}",
                s.positional.cols(),
                d.positional
            )));
        }
        if s.mesh_features.rows() != s.mesh_edges.len() || s.contact_features.rows() != s.contact_edges.len() {
            return Err(config_err("edge feature rows do not match edge lists".into()));
        }
        Ok(())
    }

    pub fn encode<'t>(&self, p: &[Var<'t>], s: &GraphSample) -> Result<Latents<'t>, Error> {
        self.check_dims(s)?;
        let tape = p[0].tape();
        let l = &self.layout;
        Ok(Latents {
            nodes: self.mlp(p, &l.enc_node, tape.constant(s.node_features.clone()))?,
            mesh: self.mlp(p, &l.enc_mesh, tape.constant(s.mesh_features.clone()))?,
            contact: self.mlp(p, &l.enc_contact, tape.constant(s.contact_features.clone()))?,
        })
    }

    fn mpnn<'t>(&self, p: &[Var<'t>], layer: &MpnnLayer, lat: Latents<'t>, s: &GraphSample) -> Result<Latents<'t>, Error> {
        let n = s.n_nodes();
        let update = |e: Var<'t>, senders: &[usize], receivers: &[usize]| -> Result<Var<'t>, TensorError> {
            let input = Var::concat_cols(&[e, lat.nodes.gather(senders)?, lat.nodes.gather(receivers)?])?;
            e.add(self.mlp(p, &layer.edge, input)?)
        };
        let mesh = update(lat.mesh, &s.mesh_edges.senders, &s.mesh_edges.receivers)?;
        let contact = update(lat.contact, &s.contact_edges.senders, &s.contact_edges.receivers)?;
        let agg_mesh = mesh.segment_sum(&s.mesh_edges.receivers, n)?;
        let agg_contact = contact.segment_sum(&s.contact_edges.receivers, n)?;
        let input = Var::concat_cols(&[lat.nodes, agg_mesh, agg_contact])?;
        let nodes = lat.nodes.add(self.mlp(p, &layer.node, input)?)?;
        Ok(Latents { nodes, mesh, contact })
    }

    /// One message-passing iteration of the pre-processor (`refine = false`)
    /// or refinement stage.
    pub fn mpnn_iteration<'t>(
        &self,
        p: &[Var<'t>],
        stage_refine: bool,
        index: usize,
        lat: Latents<'t>,
        s: &GraphSample,
    ) -> Result<Latents<'t>, Error> {
        let layers = if stage_refine { &self.layout.refine } else { &self.layout.pre };
        let layer = layers
            .get(index)
            .ok_or_else(|| config_err(format!("no message-passing layer {index}")))?;
        self.mpnn(p, layer, lat, s)
    }

    /// Soft assignment of `x` (`N×d`) to tokens. Returns tokens `P×d`,
    /// weights `N×P` and per-node temperatures `N×1`.
    pub fn slice<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        block: usize,
        x: Var<'t>,
        gumbel: Option<&mut R>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>), Error> {
        let b = self.block(block)?;
        let mut logits = b.slice_logits.apply(p, x)?;
        let tau = b
            .slice_tau
            .apply(p, x)?
            .add_scalar(self.config.tau0)
            .clamp_min(self.config.tau_min);
        if let Some(rng) = gumbel {
            let [n, k] = logits.shape();
            logits = logits.add(x.tape().constant(gumbel_noise(n, k, rng)))?;
        }
        let w = logits.div_col(tau)?.softmax(1)?;
        let z = slice_tokens(x, w)?;
        Ok((z, w, tau))
    }

    /// Multi-head scaled dot-product attention among tokens.
    pub fn token_attention<'t>(&self, p: &[Var<'t>], block: usize, z: Var<'t>) -> Result<Var<'t>, Error> {
        let b = self.block(block)?;
        let (q, k, v) = (b.q.apply(p, z)?, b.k.apply(p, z)?, b.v.apply(p, z)?);
        let c = self.config.head_dim();
        let scale = 1.0 / (c as f64).sqrt();
        let heads = (0..self.config.n_heads)
            .map(|h| {
                let qh = q.slice_cols(h * c, c)?;
                let kh = k.slice_cols(h * c, c)?;
                let vh = v.slice_cols(h * c, c)?;
                qh.matmul(kh.transpose())?.scale(scale).softmax(1)?.matmul(vh)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(b.attn_out.apply(p, Var::concat_cols(&heads)?)?)
    }

    fn block(&self, i: usize) -> Result<&Block, Error> {
        self.layout.blocks.get(i).ok_or_else(|| {
            config_err(format!(
                "block index {i} out of range ({} transformer blocks)",
                self.layout.blocks.len()
            ))
        })
    }

    pub fn transformer_block<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        block: usize,
        nodes: Var<'t>,
        positional: &Tensor,
        gumbel: Option<&mut R>,
    ) -> Result<(Var<'t>, BlockTrace), Error> {
        let b = *self.block(block)?;
        let eps = self.config.layer_norm_eps;
        let tape = nodes.tape();
        let x = Var::concat_cols(&[nodes, tape.constant(positional.clone())])?;
        let mut h = b.input.apply(p, x)?;
        let hn = h.layer_norm(p[b.norm1.g], p[b.norm1.b], eps)?;
        let (z, w, tau) = self.slice(p, block, hn, gumbel)?;
        let z2 = self.token_attention(p, block, z)?;
        h = h.add(deslice(z2, w)?)?;
        let f = b.ffn1.apply(p, h.layer_norm(p[b.norm2.g], p[b.norm2.b], eps)?)?;
        h = h.add(b.ffn2.apply(p, f.leaky_relu(self.config.leaky_slope)?)?)?;
        let out = nodes.add(b.output.apply(p, h)?)?;
        Ok((
            out,
            BlockTrace {
                weights: w.value(),
                temperature: tau.value(),
            },
        ))
    }

    /// Full network. `gumbel` supplies noise in training mode; `None` is
    /// deterministic evaluation.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        p: &[Var<'t>],
        s: &GraphSample,
        mut gumbel: Option<&mut R>,
    ) -> Result<ForwardOutput<'t>, Error> {
        let mut lat = self.encode(p, s)?;
        for layer in &self.layout.pre {
            lat = self.mpnn(p, layer, lat, s)?;
        }
        let mut traces = Vec::with_capacity(self.layout.blocks.len());
        for i in 0..self.layout.blocks.len() {
            let (nodes, trace) = self.transformer_block(p, i, lat.nodes, &s.positional, gumbel.as_deref_mut())?;
            lat.nodes = nodes;
            traces.push(trace);
        }
        for layer in &self.layout.refine {
            lat = self.mpnn(p, layer, lat, s)?;
        }
        Ok(ForwardOutput {
            output: self.mlp(p, &self.layout.decoder, lat.nodes)?,
            blocks: traces,
        })
    }

    /// Deterministic forward pass on a throwaway tape.
    pub fn predict(&self, s: &GraphSample) -> Result<(Tensor, Vec<BlockTrace>), Error> {
        let tape = Tape::new();
        let p = self.params.on_tape(&tape, false);
        let out = self.forward::<ChaCha8Rng>(&p, s, None)?;
        Ok((out.output.value(), out.blocks))
    }

    pub fn write_arrays(&self, c: &mut Container) -> Result<(), Error> {
        for (name, t) in self.params.names.iter().zip(&self.params.values) {
            c.push_tensor(&format!("param/{name}"), t)?;
        }
        Ok(())
    }

    /// Rebuilds a model from `config` and the `param/*` arrays of `c`.
    pub fn from_container(config: ModelConfig, c: &Container) -> Result<Self, Error> {
        let mut model = Model::new(config, 0)?;
        for (name, t) in model.params.names.iter().zip(model.params.values.iter_mut()) {
            let loaded = c.tensor(&format!("param/{name}"))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Schema(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(model)
    }
}

/// Added to each token's total weight before dividing.
pub const SLICE_EPS: f64 = 1e-5;

/// Weighted token means `z_j = sum_i w_ij x_i / (sum_i w_ij + eps)`. A token
/// nobody is assigned to has a vanishing total; without `eps` its gradient
/// overflows long before the forward value does.
pub fn slice_tokens<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>, TensorError> {
    let num = w.transpose().matmul(x)?;
    num.div_col(w.col_sum().add_scalar(SLICE_EPS).transpose())
}

/// Redistributes tokens to nodes: `x'_i = sum_j w_ij z'_j`.
pub fn deslice<'t>(z: Var<'t>, w: Var<'t>) -> Result<Var<'t>, TensorError> {
    w.matmul(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeList;

    fn dims() -> FeatureDims {
        FeatureDims {
            node: 3,
            mesh_edge: 6,
            contact_edge: 3,
            output: 2,
            positional: 4,
        }
    }

    fn small(blocks: usize) -> ModelConfig {
        ModelConfig {
            n_transformer_blocks: blocks,
            n_tokens: 4,
            n_heads: 2,
            transformer_dims: [8, 4, 8],
            ..ModelConfig::mgnt(dims(), 8)
        }
    }

    /// Path graph 0-1-...-(n-1) with mesh edges in both directions.
    fn path(n: usize, seed: u64) -> GraphSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for i in 0..n - 1 {
            pairs.push((i, i + 1));
            pairs.push((i + 1, i));
        }
        pairs.sort();
        let mesh_edges = EdgeList::from_pairs(&pairs);
        GraphSample {
            node_features: Tensor::uniform(n, 3, 1.0, &mut rng),
            mesh_features: Tensor::uniform(pairs.len(), 6, 1.0, &mut rng),
            mesh_edges,
            contact_edges: EdgeList::default(),
            contact_features: Tensor::zeros(0, 3),
            positional: Tensor::uniform(n, 4, 1.0, &mut rng),
        }
    }

    #[test]
    fn single_linear_count() {
        let mut s = ShapeOnly::default();
        Linear::new(&mut s, "l", 4, 8, 1.0);
        assert_eq!(s.total, 40);
    }

    #[test]
    fn param_count_matches_store() {
        for blocks in [0, 2] {
            let m = Model::new(small(blocks), 1).unwrap();
            assert_eq!(m.params().scalar_count(), m.config().param_count());
        }
    }

    #[test]
    fn published_parameter_budgets() {
        let beam = FeatureDims::for_dim(3, 8);
        let mgnt = ModelConfig::mgnt(beam, 96).param_count();
        assert!((350_000..=650_000).contains(&mgnt), "{mgnt}");
        let mgn = ModelConfig::mgn_baseline(beam).param_count();
        assert!((1_600_000..=2_400_000).contains(&mgn), "{mgn}");
        // Independent closed-form count.
        let mlp = |i: usize, h: usize, o: usize, norm: bool| i * h + h + h * o + o + if norm { 2 * o } else { 0 };
        let count = |l: usize, iters: usize, blocks: usize| {
            let (dm, di, df, p) = (64, 32, 64, 32);
            let block = (l + 48) * dm + dm + 2 * dm + dm * p + p + dm + 1 + 3 * (dm * di + di) + di * dm + dm
                + 2 * dm + dm * df + df + df * dm + dm + dm * l + l;
            mlp(12, l, l, true) + mlp(8, l, l, true) + mlp(4, l, l, true)
                + iters * 2 * mlp(3 * l, l, l, true)
                + blocks * block
                + mlp(l, l, 7, false)
        };
        assert_eq!(mgnt, count(96, 4, 2));
        assert_eq!(mgnt, 408_265);
        assert_eq!(mgn, count(128, 15, 0));
        assert_eq!(mgn, 2_052_615);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig {
            n_heads: 3,
            ..small(1)
        };
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn encode_shapes_and_empty_contacts() {
        let c = ModelConfig {
            latent_dim: 64,
            ..small(0)
        };
        let m = Model::new(c, 3).unwrap();
        let mut s = path(100, 2);
        let row = s.node_features.row(0).to_vec();
        s.node_features.row_mut(1).copy_from_slice(&row);
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let lat = m.encode(&p, &s).unwrap();
        assert_eq!(lat.nodes.shape(), [100, 64]);
        assert_eq!(lat.contact.shape(), [0, 64]);
        let v = lat.nodes.value();
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn wrong_feature_width_is_config_error() {
        let m = Model::new(small(0), 0).unwrap();
        let mut s = path(3, 0);
        s.node_features = Tensor::zeros(3, 5);
        assert!(matches!(m.predict(&s), Err(Error::Config(_))));
    }

    fn probe(m: &Model, s: &GraphSample, node: usize) -> Tensor {
        let mut s2 = s.clone();
        s2.node_features.row_mut(node)[0] += 0.5;
        let a = m.predict(s).unwrap().0;
        let b = m.predict(&s2).unwrap().0;
        let mut diff = Tensor::zeros(a.rows(), 1);
        for i in 0..a.rows() {
            let d = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            diff.set(i, 0, d);
        }
        diff
    }

    #[test]
    fn message_passing_reach_is_one_hop_per_iteration() {
        let s = path(3, 5);
        let one = Model::new(
            ModelConfig {
                mpnn_pre: 1,
                mpnn_refine: 0,
                ..small(0)
            },
            4,
        )
        .unwrap();
        let two = Model::new(
            ModelConfig {
                mpnn_pre: 1,
                mpnn_refine: 1,
                ..small(0)
            },
            4,
        )
        .unwrap();
        assert_eq!(probe(&one, &s, 0).get(2, 0), 0.0);
        assert!(probe(&two, &s, 0).get(2, 0) > 0.0);
    }

    #[test]
    fn attention_gives_global_reach() {
        let s = path(12, 6);
        let local = Model::new(small(0), 7).unwrap();
        let global = Model::new(small(2), 7).unwrap();
        let dl = probe(&local, &s, 0);
        let dg = probe(&global, &s, 0);
        for i in 5..12 {
            assert_eq!(dl.get(i, 0), 0.0, "node {i}");
            assert!(dg.get(i, 0) > 0.0, "node {i}");
        }
    }

    #[test]
    fn forward_finite_and_deterministic() {
        let m = Model::new(small(2), 8).unwrap();
        let s = path(10, 9);
        let (a, traces) = m.predict(&s).unwrap();
        assert_eq!(a.shape(), [10, 2]);
        assert!(a.is_finite());
        assert_eq!(traces.len(), 2);
        let b = m.predict(&s).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn single_token_slice_is_mean() {
        let c = ModelConfig {
            n_tokens: 1,
            ..small(1)
        };
        let m = Model::new(c, 1).unwrap();
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let x = Tensor::from_rows(&[&[1.0; 8], &[3.0; 8], &[-1.0; 8]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, w, _) = m.slice(&p, 0, tape.constant(x), Some(&mut rng)).unwrap();
        assert!(w.value().data().iter().all(|&v| v == 1.0));
        let mean = 3.0 / (3.0 + SLICE_EPS);
        assert!(z.value().data().iter().all(|&v| (v - mean).abs() < 1e-15));
    }

    #[test]
    fn identical_rows_give_identical_tokens() {
        let m = Model::new(small(1), 2).unwrap();
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let row = [0.3, -0.2, 0.9, 1.1, 0.0, 0.4, -0.7, 0.25];
        let x = Tensor::from_rows(&[&row, &row, &row]);
        let (z, w, _) = m.slice::<ChaCha8Rng>(&p, 0, tape.constant(x), None).unwrap();
        let (z, w) = (z.value(), w.value());
        for j in 0..z.rows() {
            let s: f64 = (0..3).map(|i| w.get(i, j)).sum();
            for (a, b) in z.row(j).iter().zip(row) {
                assert!((a - b * s / (s + SLICE_EPS)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hand_set_logits_give_closed_form_weights() {
        let c = ModelConfig {
            n_tokens: 2,
            tau0: 1.0,
            ..small(1)
        };
        let mut m = Model::new(c, 0).unwrap();
        // Logit weights read feature 0 into token 0; temperature weights zero.
        let mut lw = Tensor::zeros(8, 2);
        lw.set(0, 0, 1.0);
        *m.params_mut().get_mut("block.0.slice_logits.w").unwrap() = lw;
        *m.params_mut().get_mut("block.0.slice_logits.b").unwrap() = Tensor::zeros(1, 2);
        *m.params_mut().get_mut("block.0.slice_tau.w").unwrap() = Tensor::zeros(8, 1);
        *m.params_mut().get_mut("block.0.slice_tau.b").unwrap() = Tensor::zeros(1, 1);
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let mut x = Tensor::zeros(1, 8);
        x.set(0, 0, 2f64.ln());
        x.set(0, 1, 5.0);
        let (z, w, tau) = m.slice::<ChaCha8Rng>(&p, 0, tape.constant(x.clone()), None).unwrap();
        assert_eq!(tau.value().data(), &[1.0]);
        let w = w.value();
        assert!((w.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        // One node: every token is that node, shrunk by the weight floor.
        let z = z.value();
        for j in 0..2 {
            let f = w.get(0, j) / (w.get(0, j) + SLICE_EPS);
            assert!(z.row(j).iter().zip(x.row(0)).all(|(a, b)| (a - b * f).abs() < 1e-14));
        }
    }

    #[test]
    fn single_token_attention_projects_values() {
        let c = ModelConfig {
            n_tokens: 1,
            ..small(1)
        };
        let m = Model::new(c, 11).unwrap();
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let z = tape.constant(Tensor::uniform(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = m.token_attention(&p, 0, z).unwrap().value();
        let b = m.block(0).unwrap();
        let v = b.v.apply(&p, z).unwrap();
        let want = b.attn_out.apply(&p, v).unwrap().value();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn uniform_attention_averages_values() {
        let c = ModelConfig {
            n_tokens: 2,
            ..small(1)
        };
        let mut m = Model::new(c, 12).unwrap();
        for name in ["block.0.q.w", "block.0.q.b"] {
            let t = m.params_mut().get_mut(name).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let z = tape.constant(Tensor::uniform(2, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let out = m.token_attention(&p, 0, z).unwrap().value();
        let b = m.block(0).unwrap();
        let v = b.v.apply(&p, z).unwrap().value();
        let mean: Vec<f64> = (0..v.cols()).map(|c| 0.5 * (v.get(0, c) + v.get(1, c))).collect();
        let mean2 = Tensor::from_rows(&[&mean, &mean]);
        let want = b.attn_out.apply(&p, tape.constant(mean2)).unwrap().value();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn deslice_cases() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::from_rows(&[&[0.25, 0.75], &[0.6, 0.4]]));
        let z = tape.constant(Tensor::full(2, 3, 2.5));
        assert!(deslice(z, w).unwrap().value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let one = tape.constant(Tensor::full(3, 1, 1.0));
        let zr = tape.constant(Tensor::from_rows(&[&[1.0, -2.0]]));
        assert_eq!(deslice(zr, one).unwrap().value(), Tensor::from_rows(&[&[1.0, -2.0], &[1.0, -2.0], &[1.0, -2.0]]));
        let id = tape.constant(Tensor::identity(2));
        let ab = tape.constant(Tensor::from_rows(&[&[4.0], &[9.0]]));
        assert_eq!(deslice(ab, id).unwrap().value(), Tensor::from_rows(&[&[4.0], &[9.0]]));
    }

    #[test]
    fn zero_attention_output_leaves_ffn_path() {
        let mut m = Model::new(small(1), 13).unwrap();
        for name in ["block.0.attn_out.w", "block.0.attn_out.b"] {
            let t = m.params_mut().get_mut(name).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let s = path(6, 1);
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let nodes = tape.constant(Tensor::uniform(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let (out, _) = m
            .transformer_block::<ChaCha8Rng>(&p, 0, nodes, &s.positional, None)
            .unwrap();
        let b = m.block(0).unwrap();
        let eps = m.config().layer_norm_eps;
        let x = Var::concat_cols(&[nodes, tape.constant(s.positional.clone())]).unwrap();
        let h = b.input.apply(&p, x).unwrap();
        let f = b
            .ffn1
            .apply(&p, h.layer_norm(p[b.norm2.g], p[b.norm2.b], eps).unwrap())
            .unwrap();
        let h = h.add(b.ffn2.apply(&p, f.leaky_relu(0.01).unwrap()).unwrap()).unwrap();
        let want = nodes.add(b.output.apply(&p, h).unwrap()).unwrap().value();
        assert_eq!(out.value().shape(), [6, 8]);
        assert!(out.value().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn block_index_out_of_range() {
        let m = Model::new(small(1), 0).unwrap();
        let tape = Tape::new();
        let p = m.params().on_tape(&tape, false);
        let z = tape.constant(Tensor::zeros(4, 8));
        assert!(m.token_attention(&p, 1, z).is_err());
    }

    #[test]
    fn container_round_trip() {
        let m = Model::new(small(2), 21).unwrap();
        let mut c = Container::new();
        m.write_arrays(&mut c).unwrap();
        let back = Model::from_container(m.config().clone(), &c).unwrap();
        assert_eq!(back.params(), m.params());
        let wrong = ModelConfig {
            latent_dim: 16,
            ..small(2)
        };
        assert!(matches!(Model::from_container(wrong, &c), Err(Error::Schema(_))));
    }
}
