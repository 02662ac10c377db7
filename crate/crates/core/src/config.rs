//! Run configuration, read from TOML with unknown keys rejected.

use crate::data::{Boundary, PdeKind};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::tensor::Activation;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchNorm {
    /// Divide the aggregated sum by the neighbor count.
    #[default]
    Spatial,
    /// Divide by neighbor count times history length.
    Spatiotemporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Read an existing dataset directory instead of simulating.
    pub path: Option<PathBuf>,
    pub kind: PdeKind,
    pub domain: Domain,
    pub grid: usize,
    pub boundary: Boundary,
    /// Diffusivity (heat) or wave speed (wave).
    pub coefficient: f64,
    pub dt_sim: f64,
    /// Simulator steps discarded before the first stored frame.
    pub burn_in: usize,
    /// Simulator steps; every `stride`-th frame is stored.
    pub steps: usize,
    pub stride: usize,
    /// Sampled nodes, training and unseen together.
    pub nodes: usize,
    /// Nodes used for training; the rest are held out for inductive runs.
    pub train_nodes: usize,
    pub blobs: usize,
    pub blob_width: f64,
    /// Amplitude of the forcing field; zero disables it.
    pub source_amplitude: f64,
    /// Forcing period in simulated time units; absent means static forcing.
    pub source_period: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: None,
            kind: PdeKind::Heat,
            domain: Domain::Plane,
            grid: 32,
            boundary: Boundary::Periodic,
            coefficient: 0.1,
            dt_sim: 0.002,
            burn_in: 250,
            steps: 1200,
            stride: 2,
            nodes: 80,
            train_nodes: 64,
            blobs: 4,
            blob_width: 0.08,
            source_amplitude: 4.0,
            source_period: Some(0.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Neighborhood radius; derived from the training nodes when absent.
    pub eps: Option<f64>,
    pub levels: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { eps: None, levels: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the representation field.
    pub d: usize,
    /// Number of sin/cos frequency pairs in the time embedding.
    pub d_t: usize,
    /// Width of the learned parametric function.
    pub d_a: usize,
    /// Stacked V-cycles, each with its own parameters.
    pub layer_number: usize,
    /// Branch heads per trunk feature.
    pub branch_width: usize,
    /// Trunk features; defaults to `d`.
    pub trunk_width: Option<usize>,
    pub decoder_groups: usize,
    pub activation: Activation,
    pub branch_norm: BranchNorm,
    /// Hidden width of the pair-weight network.
    pub xi_hidden: usize,
    pub trunk_hidden: usize,
    /// Input frames per window.
    pub history: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 8,
            d_t: 4,
            d_a: 16,
            layer_number: 2,
            branch_width: 32,
            trunk_width: None,
            decoder_groups: 1,
            activation: Activation::Relu,
            branch_norm: BranchNorm::Spatial,
            xi_hidden: 16,
            trunk_hidden: 32,
            history: 12,
        }
    }
}

impl ModelConfig {
    pub fn trunk_width(&self) -> usize {
        self.trunk_width.unwrap_or(self.d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the reconstruction term.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Windows per step.
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Offset between consecutive training windows, in frames.
    pub window_stride: usize,
    /// Fraction of training nodes drawn at random for each step; 1 uses the
    /// full graph every time.
    pub node_keep: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            batch: 8,
            epochs: 20,
            patience: 15,
            window_stride: 2,
            node_keep: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub inductive_ratio: f64,
    pub missing_ratio: f64,
    /// Output frames per window.
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            inductive_ratio: 0.25,
            missing_ratio: 0.0,
            horizon: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            dataset: DatasetConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Named streams derived from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Data,
    Init,
    Split,
    Mask,
    Shuffle,
    Levels,
}

impl SeedStream {
    fn tag(self) -> &'static str {
        match self {
            SeedStream::Data => "data",
            SeedStream::Init => "init",
            SeedStream::Split => "split",
            SeedStream::Mask => "mask",
            SeedStream::Shuffle => "shuffle",
            SeedStream::Levels => "levels",
        }
    }
}

/// SplitMix64 finalizer over the root seed and an FNV-1a hash of the stream tag.
pub fn sub_seed(root: u64, stream: SeedStream) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.tag().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        sub_seed(self.seed, stream)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let ds = &self.dataset;
        if ds.path.is_none() {
            if ds.grid < 4 {
                return bad(format!("dataset.grid must be at least 4, got {}", ds.grid));
            }
            if !(ds.coefficient > 0.0) || !(ds.dt_sim > 0.0) {
                return bad("dataset.coefficient and dataset.dt_sim must be positive".into());
            }
            if ds.stride == 0 || ds.steps < ds.stride {
                return bad(format!(
                    "dataset.stride {} must lie in 1..=steps ({})",
                    ds.stride, ds.steps
                ));
            }
            if ds.blob_width <= 0.0 || !ds.source_amplitude.is_finite() {
                return bad("dataset.blob_width must be positive and source_amplitude finite".into());
            }
            if matches!(ds.source_period, Some(p) if !(p > 0.0)) {
                return bad("dataset.source_period must be positive".into());
            }
            if ds.nodes == 0 {
                return bad("dataset.nodes must be positive".into());
            }
        }
        if ds.train_nodes == 0 || (ds.path.is_none() && ds.train_nodes > ds.nodes) {
            return bad(format!("dataset.train_nodes {} must lie in 1..=nodes", ds.train_nodes));
        }
        if matches!(self.graph.eps, Some(e) if !(e > 0.0) || !e.is_finite()) {
            return bad("graph.eps must be positive".into());
        }
        if self.graph.levels == 0 {
            return bad("graph.levels must be at least 1".into());
        }
        let m = &self.model;
        for (name, v) in [
            ("d", m.d),
            ("d_t", m.d_t),
            ("d_a", m.d_a),
            ("layer_number", m.layer_number),
            ("branch_width", m.branch_width),
            ("decoder_groups", m.decoder_groups),
            ("xi_hidden", m.xi_hidden),
            ("trunk_hidden", m.trunk_hidden),
            ("history", m.history),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if m.trunk_width == Some(0) {
            return bad("model.trunk_width must be positive".into());
        }
        if m.decoder_groups > self.eval.horizon {
            return bad(format!(
                "model.decoder_groups {} exceeds eval.horizon {}",
                m.decoder_groups, self.eval.horizon
            ));
        }
        if !(self.loss.alpha >= 0.0) || !self.loss.alpha.is_finite() {
            return bad(format!("loss.alpha must be non-negative, got {}", self.loss.alpha));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return bad(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if o.batch == 0 || o.window_stride == 0 {
            return bad("optimizer.batch and optimizer.window_stride must be positive".into());
        }
        if !(o.node_keep > 0.0 && o.node_keep <= 1.0) {
            return bad(format!("optimizer.node_keep must lie in (0, 1], got {}", o.node_keep));
        }
        let e = &self.eval;
        if !(e.inductive_ratio >= 0.0) || !e.inductive_ratio.is_finite() {
            return bad(format!(
                "eval.inductive_ratio must be non-negative, got {}",
                e.inductive_ratio
            ));
        }
        if !(0.0..1.0).contains(&e.missing_ratio) {
            return bad(format!(
                "eval.missing_ratio must lie in [0, 1), got {}",
                e.missing_ratio
            ));
        }
        if e.horizon == 0 {
            return bad("eval.horizon must be positive".into());
        }
        Ok(())
    }
}
