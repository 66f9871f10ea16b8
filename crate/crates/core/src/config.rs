//! Run configuration: one TOML file with `[data]`, `[graph]`, `[model]`,
//! `[train]` and `[metrics]` sections. Every key has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Error};
use crate::graph::{FeatureDims, GraphConfig};
use crate::model::{ModelConfig, TargetMode};
use crate::synthetic::{impact_graph_config, long_range_graph_config, LongRangeConfig, OracleConfig};
use crate::training::{LossMask, TrainConfig};

pub const SEED_ENV: &str = "MGNT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Impact,
    LongRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub impact: OracleConfig,
    pub long_range: LongRangeConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Impact,
            n_train: 18,
            n_test: 10,
            impact: OracleConfig::default(),
            long_range: LongRangeConfig::default(),
        }
    }
}

impl DataSection {
    pub fn graph(&self) -> GraphConfig {
        match self.kind {
            DataKind::Impact => impact_graph_config(&self.impact),
            DataKind::LongRange => long_range_graph_config(&self.long_range),
        }
    }
}

/// Overrides applied on top of the graph settings stored with a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub contact_radius: Option<f64>,
    pub tied_k: Option<usize>,
    pub n_frequencies: Option<usize>,
}

impl GraphSection {
    pub fn apply(&self, base: GraphConfig) -> GraphConfig {
        GraphConfig {
            contact_radius: self.contact_radius.or(base.contact_radius),
            tied_k: self.tied_k.unwrap_or(base.tied_k),
            n_frequencies: self.n_frequencies.unwrap_or(base.n_frequencies),
        }
    }
}

/// Model settings without the feature widths, which follow from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub mpnn_pre: usize,
    pub mpnn_refine: usize,
    pub n_transformer_blocks: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub transformer_dims: [usize; 3],
    pub tau0: f64,
    pub tau_min: f64,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    pub target_mode: TargetMode,
    pub monotone_hardening: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_config(&ModelConfig::mgnt(FeatureDims::for_dim(2, 8), 96))
    }
}

impl ModelSection {
    pub fn from_config(c: &ModelConfig) -> Self {
        Self {
            latent_dim: c.latent_dim,
            mpnn_pre: c.mpnn_pre,
            mpnn_refine: c.mpnn_refine,
            n_transformer_blocks: c.n_transformer_blocks,
            n_heads: c.n_heads,
            n_tokens: c.n_tokens,
            transformer_dims: c.transformer_dims,
            tau0: c.tau0,
            tau_min: c.tau_min,
            leaky_slope: c.leaky_slope,
            layer_norm_eps: c.layer_norm_eps,
            target_mode: c.target_mode,
            monotone_hardening: c.monotone_hardening,
        }
    }

    pub fn to_config(&self, dims: FeatureDims) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            mpnn_pre: self.mpnn_pre,
            mpnn_refine: self.mpnn_refine,
            n_transformer_blocks: self.n_transformer_blocks,
            n_heads: self.n_heads,
            n_tokens: self.n_tokens,
            transformer_dims: self.transformer_dims,
            tau0: self.tau0,
            tau_min: self.tau_min,
            leaky_slope: self.leaky_slope,
            layer_norm_eps: self.layer_norm_eps,
            target_mode: self.target_mode,
            monotone_hardening: self.monotone_hardening,
            dims,
        }
    }
}

/// Training settings; the seed comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub noise_scale: f64,
    pub loss_mask: LossMask,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr_initial: t.lr_initial,
            lr_final: t.lr_final,
            noise_scale: t.noise_scale,
            loss_mask: t.loss_mask,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Rollout length; unset uses the full stored trajectory.
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data generation, initialization and training.
    pub seed: u64,
    pub workers: usize,
    pub data: DataSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            data: DataSection::default(),
            graph: GraphSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            msg: e.message().to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path`, or returns defaults when `None`. Returns the verbatim
    /// text alongside.
    pub fn load(path: Option<&Path>) -> Result<(Self, Option<String>), Error> {
        match path {
            None => Ok((Self::default(), None)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok((Self::from_toml(&text, p)?, Some(text)))
            }
        }
    }

    /// `--seed` wins over `MGNT_SEED`, which wins over the file.
    pub fn apply_seed(&mut self, env: Option<&str>, flag: Option<u64>) -> Result<(), ConfigError> {
        if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        if let Some(s) = flag {
            self.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.data.kind {
            DataKind::Impact => self.data.impact.validate()?,
            DataKind::LongRange => self.data.long_range.validate()?,
        }
        if self.data.n_train == 0 {
            return Err(ConfigError::Invalid("data.n_train must be at least 1".into()));
        }
        self.train_config().validate()?;
        self.model.to_config(FeatureDims::for_dim(2, 8)).validate()?;
        if self.metrics.horizon == Some(0) {
            return Err(ConfigError::Invalid("metrics.horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            lr_initial: t.lr_initial,
            lr_final: t.lr_final,
            noise_scale: t.noise_scale,
            seed: self.seed,
            loss_mask: t.loss_mask,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Where a default comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Stated in the reference architecture description.
    Paper,
    /// Chosen here.
    Default,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Paper => "paper",
            Provenance::Default => "default",
        }
    }
}

/// `(key, provenance, meaning)` for every documented key. Keys of
/// `data.impact.*` and `data.long_range.*` are listed by section.
pub const SCHEMA: &[(&str, Provenance, &str)] = &[
    ("seed", Provenance::Default, "master seed; MGNT_SEED and --seed override it"),
    ("workers", Provenance::Default, "threads for generation and evaluation"),
    ("data.kind", Provenance::Default, "impact or long_range"),
    ("data.n_train", Provenance::Default, "training trajectories"),
    ("data.n_test", Provenance::Default, "held-out trajectories"),
    ("data.impact.*", Provenance::Default, "lattice-on-wall oracle settings"),
    ("data.impact.frames", Provenance::Default, "stored frames per trajectory (50)"),
    ("data.long_range.*", Provenance::Default, "elastic chain settings"),
    ("graph.contact_radius", Provenance::Default, "contact radius; dataset value when unset"),
    ("graph.tied_k", Provenance::Default, "tied neighbours per interface node"),
    ("graph.n_frequencies", Provenance::Default, "positional-encoding frequencies per axis"),
    ("model.latent_dim", Provenance::Default, "MLP and latent width"),
    ("model.mpnn_pre", Provenance::Paper, "message-passing iterations before attention (2)"),
    ("model.mpnn_refine", Provenance::Paper, "message-passing iterations after attention (2)"),
    ("model.n_transformer_blocks", Provenance::Paper, "stacked attention blocks (2)"),
    ("model.n_heads", Provenance::Paper, "attention heads (4)"),
    ("model.n_tokens", Provenance::Paper, "physical tokens (32)"),
    ("model.transformer_dims", Provenance::Paper, "block, attention and feed-forward widths (64-32-64)"),
    ("model.tau0", Provenance::Default, "base slice temperature"),
    ("model.tau_min", Provenance::Default, "temperature floor"),
    ("model.leaky_slope", Provenance::Default, "LeakyReLU negative slope"),
    ("model.layer_norm_eps", Provenance::Default, "LayerNorm epsilon"),
    ("model.target_mode", Provenance::Paper, "absolute next state or delta"),
    ("model.monotone_hardening", Provenance::Default, "softplus hardening increment"),
    ("train.steps", Provenance::Default, "optimizer steps"),
    ("train.batch_size", Provenance::Default, "samples per step, all from one trajectory"),
    ("train.lr_initial", Provenance::Default, "Adam learning rate at step 0"),
    ("train.lr_final", Provenance::Default, "learning rate at the last step"),
    ("train.noise_scale", Provenance::Default, "input noise in units of feature std"),
    ("train.loss_mask", Provenance::Paper, "deformable or all"),
    ("train.checkpoint_every", Provenance::Default, "steps between checkpoints; 0 disables"),
    ("metrics.horizon", Provenance::Default, "rollout steps; full trajectory when unset"),
];
