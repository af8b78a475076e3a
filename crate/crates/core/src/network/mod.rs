//! Blocks, the full network and its configuration.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingState,
    CHECKPOINT_MAGIC,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{inter_channels, Branch, Branches, CapturedMasks, SpatialAttention};
use crate::autodiff::{ConvGeom, NormLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::params::{Ctx, Mode, ParamStore};
use crate::temporal::{TemporalConv, TemporalMode};
use crate::tensor::Tensor;

pub const FULL_CHANNELS: [usize; 10] = [64, 64, 64, 64, 128, 128, 128, 256, 256, 256];
pub const FULL_STRIDES: [usize; 10] = [1, 1, 1, 1, 2, 1, 1, 2, 1, 1];

/// Skeleton topology. Serialized as `ntu`, `kinetics` or `chain:<joints>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GraphKind {
    Ntu,
    Kinetics,
    /// A path `0 - 1 - … - (joints-1)`, for small test models.
    Chain(usize),
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Ntu => f.write_str("ntu"),
            GraphKind::Kinetics => f.write_str("kinetics"),
            GraphKind::Chain(v) => write!(f, "chain:{v}"),
        }
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntu" => Ok(GraphKind::Ntu),
            "kinetics" => Ok(GraphKind::Kinetics),
            _ => s
                .strip_prefix("chain:")
                .and_then(|v| v.parse().ok())
                .filter(|&v| v >= 2)
                .map(GraphKind::Chain)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown graph `{s}` (expected ntu, kinetics or chain:<joints>)"
                    ))
                }),
        }
    }
}

impl TryFrom<String> for GraphKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GraphKind> for String {
    fn from(g: GraphKind) -> String {
        g.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub graph: GraphKind,
    /// Extra head/hand/foot links in the adjacency.
    pub extra_links: bool,
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub dropout: f64,
    pub temporal: TemporalMode,
    pub branches: Branches,
    /// 1×1 convolution lifting the attention masks to the output channels.
    pub extension_conv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::ntu()
    }
}

impl ModelConfig {
    /// Ten blocks on the 25-joint graph, 60 classes.
    pub fn ntu() -> Self {
        ModelConfig {
            graph: GraphKind::Ntu,
            extra_links: true,
            in_channels: 3,
            num_classes: 60,
            channels: FULL_CHANNELS.to_vec(),
            strides: FULL_STRIDES.to_vec(),
            dropout: 0.5,
            temporal: TemporalMode::Multiscale,
            branches: Branches::Hybrid,
            extension_conv: true,
        }
    }

    /// Ten blocks on the 18-joint graph, 400 classes.
    pub fn kinetics() -> Self {
        ModelConfig {
            graph: GraphKind::Kinetics,
            num_classes: 400,
            ..Self::ntu()
        }
    }

    /// Two narrow blocks on a 5-joint chain, 3 classes, no dropout.
    pub fn tiny() -> Self {
        ModelConfig {
            graph: GraphKind::Chain(5),
            extra_links: false,
            in_channels: 3,
            num_classes: 3,
            channels: vec![4, 8],
            strides: vec![1, 2],
            dropout: 0.0,
            ..Self::ntu()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.channels.len() != self.strides.len() {
            return bad(format!(
                "{} block channel counts but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if let Some(s) = self.strides.iter().find(|&&s| s == 0 || s > 2) {
            return bad(format!("stride {s} not in {{1, 2}}"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0) {
            return bad(format!("block channel count {c} must be positive"));
        }
        if self.temporal == TemporalMode::Multiscale {
            if let Some(c) = self.channels.iter().find(|&&c| c % 4 != 0) {
                return bad(format!(
                    "block channel count {c} must be divisible by 4 for multi-scale temporal"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn build_graph(&self) -> Result<GraphSpec> {
        match self.graph {
            GraphKind::Ntu => Ok(GraphSpec::ntu(self.extra_links)),
            GraphKind::Kinetics => Ok(GraphSpec::kinetics(self.extra_links)),
            GraphKind::Chain(v) => {
                GraphSpec::from_edges(v, (1..v).map(|c| (c - 1, c)).collect(), None)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `ReLU(temporal(BN(spatial(X))) + residual(X))`.
#[derive(Clone, Debug)]
pub struct Block {
    prefix: String,
    spatial: SpatialAttention,
    temporal: TemporalConv,
    c_in: usize,
    c_out: usize,
    stride: usize,
}

impl Block {
    pub fn new(
        index: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        graph: &GraphSpec,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let prefix = format!("blocks.{index}");
        Ok(Block {
            spatial: SpatialAttention::new(
                format!("{prefix}.spatial"),
                index,
                c_in,
                inter_channels(c_in),
                c_out,
                graph,
                cfg.branches,
                cfg.extension_conv,
            )?,
            temporal: TemporalConv::new(format!("{prefix}.temporal"), c_out, stride, cfg.temporal)?,
            prefix,
            c_in,
            c_out,
            stride,
        })
    }

    fn has_residual_conv(&self) -> bool {
        self.c_in != self.c_out || self.stride != 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.spatial.init(store, rng)?;
        store.init_norm(&format!("{}.spatial_bn", self.prefix), self.c_out, true)?;
        self.temporal.init(store, rng)?;
        if self.has_residual_conv() {
            store.init_conv(
                &format!("{}.residual", self.prefix),
                self.c_out,
                self.c_in,
                1,
                rng,
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = self.spatial.forward(ctx, x)?;
        let s = ctx.batch_norm(
            &format!("{}.spatial_bn", self.prefix),
            s,
            NormLayout::Channel,
        )?;
        let t = self.temporal.forward(ctx, s)?;
        let r = if self.has_residual_conv() {
            let geom = ConvGeom {
                stride: self.stride,
                ..ConvGeom::POINTWISE
            };
            ctx.conv(&format!("{}.residual", self.prefix), x, geom)?
        } else {
            x
        };
        let y = ctx.tape.add(t, r)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Forward {
    pub mode: Mode,
    pub disable: Option<Branch>,
    /// Dropout mask seed; dropout is skipped without one.
    pub dropout_seed: Option<u64>,
    pub capture_layer: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    graph: GraphSpec,
    blocks: Vec<Block>,
    pub store: ParamStore,
}

impl Model {
    /// Builds the network and draws initial parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let graph = config.build_graph()?;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut c_in = config.in_channels;
        for (i, (&c_out, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            blocks.push(Block::new(i, c_in, c_out, stride, &graph, &config)?);
            c_in = c_out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.init_norm("input_bn", config.in_channels * graph.num_joints(), true)?;
        for b in &blocks {
            b.init(&mut store, &mut rng)?;
        }
        let c_last = *config.channels.last().expect("validated");
        let bound = 1.0 / (c_last as f64).sqrt();
        store.insert_param(
            "fc.w",
            Tensor::rand_uniform(&[c_last, config.num_classes], -bound, bound, &mut rng),
            true,
        )?;
        store.insert_param(
            "fc.b",
            Tensor::rand_uniform(&[config.num_classes], -bound, bound, &mut rng),
            true,
        )?;
        Ok(Model {
            config,
            graph,
            blocks,
            store,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .store
            .params()
            .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
            .chain(
                model
                    .store
                    .buffers()
                    .map(|(n, t)| (n.to_string(), t.shape().to_vec())),
            )
            .collect();
        let given: Vec<(String, Vec<usize>)> = store
            .params()
            .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
            .chain(
                store
                    .buffers()
                    .map(|(n, t)| (n.to_string(), t.shape().to_vec())),
            )
            .collect();
        if expected != given {
            let missing = expected.iter().find(|e| !given.contains(e));
            let extra = given.iter().find(|g| !expected.contains(g));
            return Err(Error::corrupt(
                "parameter set",
                format!(
                    "does not match the configuration (missing {missing:?}, unexpected {extra:?})"
                ),
            ));
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// `(N, M, C, T, V)` to `(N, num_classes)` logits.
    pub fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let xs = ctx.tape.shape(x).to_vec();
        let v = self.graph.num_joints();
        let [n, m, c, t, vv] = xs[..] else {
            return Err(Error::shape(
                "model input",
                &xs,
                &[0, 0, self.config.in_channels, 0, v],
            ));
        };
        if c != self.config.in_channels || vv != v || n == 0 || m == 0 || t == 0 {
            return Err(Error::shape(
                "model input",
                &xs,
                &[n, m, self.config.in_channels, t, v],
            ));
        }
        let h = ctx.tape.reshape(x, &[n * m, c, t, v])?;
        let mut h = ctx.batch_norm("input_bn", h, NormLayout::ChannelVertex)?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        let h = ctx.tape.mean_axis(h, 3)?;
        let h = ctx.tape.mean_axis(h, 2)?;
        let c_last = ctx.tape.shape(h)[1];
        let h = ctx.tape.reshape(h, &[n, m, c_last])?;
        let h = ctx.tape.mean_axis(h, 1)?;
        let h = ctx.dropout(h, self.config.dropout)?;
        let w = ctx.param("fc.w")?;
        let b = ctx.param("fc.b")?;
        let y = ctx.tape.matmul(h, w)?;
        ctx.tape.add_suffix(y, b)
    }

    /// Logits in train mode, softmax probabilities in eval mode.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.logits(ctx, x)?;
        match ctx.mode() {
            Mode::Train => Ok(y),
            Mode::Eval => ctx.tape.softmax(y, 1),
        }
    }

    pub fn context<'t, 's>(&'s self, tape: &'t mut Tape, opts: Forward) -> Ctx<'t, 's> {
        let mut ctx = Ctx::new(tape, &self.store, opts.mode).with_disable(opts.disable);
        if let Some(seed) = opts.dropout_seed {
            ctx = ctx.with_dropout_seed(seed);
        }
        if let Some(layer) = opts.capture_layer {
            ctx = ctx.with_capture(layer);
        }
        ctx
    }

    /// Eval-mode class probabilities `(N, num_classes)`.
    pub fn predict(&self, x: &Tensor, disable: Option<Branch>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let opts = Forward {
            disable,
            ..Forward::default()
        };
        let mut ctx = self.context(&mut tape, opts);
        let xv = ctx.tape.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Eval-mode forward that also returns the masks of block `layer`.
    pub fn capture_masks(&self, x: &Tensor, layer: usize) -> Result<(Tensor, Vec<CapturedMasks>)> {
        if layer >= self.blocks.len() {
            return Err(Error::invalid(format!(
                "layer {layer} out of range: the model has {} blocks",
                self.blocks.len()
            )));
        }
        let mut tape = Tape::new();
        let opts = Forward {
            capture_layer: Some(layer),
            ..Forward::default()
        };
        let mut ctx = self.context(&mut tape, opts);
        let xv = ctx.tape.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        let masks = ctx.take_captured();
        Ok((ctx.tape.value(y).clone(), masks))
    }
}

#[cfg(test)]
mod tests;
