//! The four U-Net variants as explicit node graphs.
//!
//! Encoder level `i` runs a block at width `n·2^i` followed by a `(1,2,2)`
//! max-pool; the bottleneck runs at `n·2^depth`. Every skip and the
//! bottleneck output pass through their own `L×1×1` time reducer, so the
//! whole decoder works on temporal extent 1. The head is a 1×1×1
//! convolution to `V` channels followed by ReLU.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{BlockKind, BlockSpec, ForwardCtx, DEFAULT_ASYMM_BRANCHES};
use crate::error::{Error, Result};
use crate::exec;
use crate::data::{SCALE_HIGH, SCALE_LOW};
use crate::nn::{he_init, ConvSpec, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const HEAD_WEIGHT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "3ddr-unet")]
    Plain,
    #[serde(rename = "res-3ddr-unet")]
    Residual,
    #[serde(rename = "inception-res-3ddr-unet")]
    InceptionResidual,
    #[serde(rename = "asymm-inception-res-3ddr-unet")]
    AsymmInceptionResidual,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Plain,
        Architecture::Residual,
        Architecture::InceptionResidual,
        Architecture::AsymmInceptionResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Plain => "3ddr-unet",
            Architecture::Residual => "res-3ddr-unet",
            Architecture::InceptionResidual => "inception-res-3ddr-unet",
            Architecture::AsymmInceptionResidual => "asymm-inception-res-3ddr-unet",
        }
    }

    /// Human-readable label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Architecture::Plain => "3DDR-UNet",
            Architecture::Residual => "Res-3DDR-UNet",
            Architecture::InceptionResidual => "InceptionRes-3DDR-UNet",
            Architecture::AsymmInceptionResidual => "AsymmInceptionRes-3DDR-UNet",
        }
    }

    /// Base width giving the four models comparable parameter totals at
    /// the default depth.
    pub fn default_base_filters(self) -> usize {
        match self {
            Architecture::Plain | Architecture::Residual => 16,
            Architecture::InceptionResidual => 28,
            Architecture::AsymmInceptionResidual => 32,
        }
    }

    pub fn block_kind(self, asymm_branch_sizes: &[usize]) -> BlockKind {
        match self {
            Architecture::Plain => BlockKind::Plain,
            Architecture::Residual => BlockKind::Residual,
            Architecture::InceptionResidual => BlockKind::InceptionResidual,
            Architecture::AsymmInceptionResidual => BlockKind::AsymmInceptionResidual {
                branch_sizes: asymm_branch_sizes.to_vec(),
                factorized: true,
            },
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_owned()))
    }
}

fn default_depth() -> usize {
    4
}
fn default_lags() -> usize {
    10
}
fn default_extent() -> usize {
    128
}
fn default_variables() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.5
}
fn default_branches() -> Vec<usize> {
    DEFAULT_ASYMM_BRANCHES.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// `None` picks [`Architecture::default_base_filters`].
    #[serde(default)]
    pub base_filters: Option<usize>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_variables")]
    pub variables: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_branches")]
    pub asymm_branch_sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            base_filters: None,
            depth: default_depth(),
            lags: default_lags(),
            height: default_extent(),
            width: default_extent(),
            variables: default_variables(),
            dropout: default_dropout(),
            asymm_branch_sizes: default_branches(),
            seed: 0,
        }
    }

    pub fn filters(&self) -> usize {
        self.base_filters
            .unwrap_or_else(|| self.architecture.default_base_filters())
    }

    pub fn with_filters(mut self, n: usize) -> Self {
        self.base_filters = Some(n);
        self
    }

    pub fn with_grid(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filters();
        if n == 0 {
            return Err(Error::Config("base_filters must be at least 1".into()));
        }
        if self.lags == 0 {
            return Err(Error::Config("lags must be at least 1".into()));
        }
        if self.variables == 0 {
            return Err(Error::Config("variables must be at least 1".into()));
        }
        let step = 1usize
            .checked_shl(self.depth as u32)
            .filter(|s| *s <= self.height.max(self.width))
            .ok_or_else(|| Error::Config(format!("depth {} too large", self.depth)))?;
        if self.height % step != 0 || self.width % step != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "grid {}×{} not divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// `(L, H, W, V)` of one input sample.
    pub fn input_shape(&self) -> [usize; 4] {
        [self.lags, self.height, self.width, self.variables]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [1, self.height, self.width, self.variables]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeOp {
    Input,
    Block(BlockSpec),
    MaxPool,
    Upsample,
    Concat,
    Dropout(f64),
    Head(ConvSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    /// Per-sample output `(T, H, W, C)`.
    pub shape: [usize; 4],
}

impl Node {
    pub fn param_count(&self) -> usize {
        match &self.op {
            NodeOp::Block(b) => b.param_count(),
            NodeOp::Head(s) => s.param_count(),
            _ => 0,
        }
    }

    pub fn conv_count(&self) -> usize {
        match &self.op {
            NodeOp::Block(b) => b.conv_count(),
            NodeOp::Head(_) => 1,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub params: usize,
    pub conv_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub layers: Vec<LayerCount>,
    pub total: usize,
    pub conv_layers: usize,
}

/// Per-node batch-norm statistics gathered during a training forward pass.
pub type BatchStats<T> = Vec<(String, Vec<T>, Vec<T>)>;

#[derive(Clone, Debug)]
pub struct ModelGraph<T: Scalar = f32> {
    pub config: ModelConfig,
    pub nodes: Vec<Node>,
    pub params: ParamStore<T>,
    /// Batch-norm running statistics.
    pub buffers: ParamStore<T>,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, name: String, op: NodeOp, inputs: Vec<usize>) -> Result<usize> {
        let shapes: Vec<[usize; 4]> = inputs.iter().map(|&i| self.nodes[i].shape).collect();
        let shape = match &op {
            NodeOp::Input => unreachable!("input is pushed directly"),
            NodeOp::Block(b) => b.output_shape(shapes[0])?,
            NodeOp::MaxPool => {
                let [t, h, w, c] = shapes[0];
                [t, h / 2, w / 2, c]
            }
            NodeOp::Upsample => {
                let [t, h, w, c] = shapes[0];
                [t, h * 2, w * 2, c]
            }
            NodeOp::Concat => {
                let [t, h, w, _] = shapes[0];
                if shapes.iter().any(|s| s[..3] != [t, h, w]) {
                    return Err(Error::Shape(format!("concat of mismatched shapes {shapes:?}")));
                }
                [t, h, w, shapes.iter().map(|s| s[3]).sum()]
            }
            NodeOp::Dropout(_) => shapes[0],
            NodeOp::Head(s) => {
                let [t, h, w, _] = shapes[0];
                [t, h, w, s.out_channels]
            }
        };
        self.nodes.push(Node {
            name,
            op,
            inputs,
            shape,
        });
        Ok(self.nodes.len() - 1)
    }
}

impl<T: Scalar> ModelGraph<T> {
    /// Builds the graph and He-initializes its parameters from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let kind = config.architecture.block_kind(&config.asymm_branch_sizes);
        let n = config.filters();
        let lags = config.lags;
        let mut b = Builder {
            nodes: vec![Node {
                name: "input".into(),
                op: NodeOp::Input,
                inputs: Vec::new(),
                shape: config.input_shape(),
            }],
        };
        let block = |cin: usize, cout: usize| BlockSpec::new(kind.clone(), cin, cout);
        let reducer = |c: usize| BlockSpec::new(BlockKind::TimeReducer { lags }, c, c);

        let mut cur = 0;
        let mut channels = config.variables;
        let mut skips = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let width = n << i;
            let enc = b.push(format!("enc{i}"), NodeOp::Block(block(channels, width)?), vec![cur])?;
            skips.push(b.push(format!("skip{i}"), NodeOp::Block(reducer(width)?), vec![enc])?);
            cur = b.push(format!("pool{i}"), NodeOp::MaxPool, vec![enc])?;
            channels = width;
        }
        let width = n << config.depth;
        cur = b.push("bottleneck".into(), NodeOp::Block(block(channels, width)?), vec![cur])?;
        cur = b.push("bottleneck_reduce".into(), NodeOp::Block(reducer(width)?), vec![cur])?;
        cur = b.push("dropout".into(), NodeOp::Dropout(config.dropout), vec![cur])?;
        channels = width;
        for i in (0..config.depth).rev() {
            let width = n << i;
            let up = b.push(format!("up{i}"), NodeOp::Upsample, vec![cur])?;
            let cat = b.push(format!("cat{i}"), NodeOp::Concat, vec![up, skips[i]])?;
            cur = b.push(format!("dec{i}"), NodeOp::Block(block(channels + width, width)?), vec![cat])?;
            channels = width;
        }
        b.push(
            "head".into(),
            NodeOp::Head(ConvSpec::same([1, 1, 1], channels, config.variables)),
            vec![cur],
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for node in &b.nodes {
            match &node.op {
                NodeOp::Block(spec) => spec.init(&node.name, &mut rng, &mut params, &mut buffers)?,
                NodeOp::Head(spec) => {
                    // Starts near the middle of the scaled range with small
                    // weights so the output ReLU is active from the first step.
                    let p = he_init::<T>(spec, rand::Rng::random(&mut rng))?;
                    let scale = T::of(HEAD_WEIGHT_SCALE);
                    params.insert(format!("{}.weight", node.name), p.weights.map(|w| w * scale));
                    let mid = T::of(0.5 * (SCALE_LOW + SCALE_HIGH));
                    params.insert(format!("{}.bias", node.name), Tensor::full(&[spec.out_channels], mid)?);
                }
                _ => {}
            }
        }
        Ok(ModelGraph {
            config,
            nodes: b.nodes,
            params,
            buffers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Records the graph on `ctx.tape` for a batch already registered as `x`.
    pub fn trace(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        Ok(*self.trace_nodes(ctx, x)?.last().expect("graph has nodes"))
    }

    /// Like [`trace`](Self::trace) but returns the output of every node.
    pub fn trace_nodes(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut out: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |k: usize| out[node.inputs[k]];
            let v = match &node.op {
                NodeOp::Input => x,
                NodeOp::Block(spec) => spec.forward(&node.name, ctx, arg(0))?,
                NodeOp::MaxPool => ctx.tape.maxpool(arg(0))?,
                NodeOp::Upsample => ctx.tape.upsample(arg(0))?,
                NodeOp::Concat => {
                    let inputs: Vec<Var> = node.inputs.iter().map(|&i| out[i]).collect();
                    ctx.tape.concat(&inputs, 4)?
                }
                NodeOp::Dropout(rate) => ctx.dropout(arg(0), *rate)?,
                NodeOp::Head(spec) => {
                    let y = ctx.conv(&node.name, spec, arg(0))?;
                    ctx.tape.relu(y)
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let expected = self.config.input_shape();
        if batch.ndim() != 5 || batch.shape()[1..] != expected {
            return Err(Error::Shape(format!(
                "model expects (B,{},{},{},{}), got {:?}",
                expected[0],
                expected[1],
                expected[2],
                expected[3],
                batch.shape()
            )));
        }
        Ok(batch.shape()[0])
    }

    /// `(B, L, H, W, V)` → `(B, 1, H, W, V)`.
    ///
    /// Eval mode runs samples independently (in parallel when enabled) and
    /// is deterministic. Train mode normalizes with batch statistics and
    /// draws dropout masks from `seed`; running statistics are untouched.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        match mode {
            Mode::Eval => {
                let outs = exec::map_units(b, |i| self.forward_one(&batch.index_axis0(i)?));
                let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
                Tensor::stack(&outs.iter().collect::<Vec<_>>())
            }
            Mode::Train => {
                let mut ctx = ForwardCtx::new(Tape::no_grad(), &self.params, &self.buffers, mode, seed);
                let x = ctx.tape.leaf(batch.clone());
                let y = self.trace(&mut ctx, x)?;
                Ok(ctx.tape.value(y).clone())
            }
        }
    }

    fn forward_one(&self, sample: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(sample.shape());
        let mut ctx = ForwardCtx::new(Tape::no_grad(), &self.params, &self.buffers, Mode::Eval, 0);
        let x = ctx.tape.leaf(sample.reshape(&shape)?);
        let y = self.trace(&mut ctx, x)?;
        let out = ctx.tape.value(y);
        out.reshape(&out.shape()[1..])
    }

    /// Applies `running = m·running + (1−m)·batch` for every collected
    /// batch-norm layer.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>, momentum: f64) -> Result<()> {
        let m = T::of(momentum);
        for (name, mean, var) in stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = self.buffers.get_mut(&format!("{name}.{suffix}"))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * v;
                }
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> ParamReport {
        let layers: Vec<LayerCount> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, NodeOp::Block(_) | NodeOp::Head(_)))
            .map(|n| LayerCount {
                name: n.name.clone(),
                params: n.param_count(),
                conv_layers: n.conv_count(),
            })
            .collect();
        ParamReport {
            total: layers.iter().map(|l| l.params).sum(),
            conv_layers: layers.iter().map(|l| l.conv_layers).sum(),
            layers,
        }
    }

    /// CSV `layer,output_shape,params`, one row per node.
    pub fn summarize(&self) -> String {
        let mut s = String::from("layer,output_shape,params\n");
        for node in &self.nodes {
            let [t, h, w, c] = node.shape;
            let _ = writeln!(s, "{},\"({t},{h},{w},{c})\",{}", node.name, node.param_count());
        }
        s
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            config: self.config.clone(),
            nodes: self.nodes.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }
}
