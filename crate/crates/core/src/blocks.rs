//! Composite building blocks of the four U-Net variants.
//!
//! | kind | structure |
//! |------|-----------|
//! | plain | conv→ReLU→conv→ReLU |
//! | residual | ReLU(BN(conv→ReLU→conv→ReLU→conv) + P(x)) |
//! | inception-residual | 3 branches (1×1×1 reducer first), concat, 1×1×1 combiner, BN, + P(x), ReLU |
//! | asymmetric inception-residual | 5 factorized branches, concat, combiner, BN, + P(x), ReLU |
//! | time reducer | `L×1×1` valid conv |
//!
//! `P` is the identity when channel counts agree and a 1×1×1 projection
//! otherwise. All 3D kernels use same padding, so every block except the
//! time reducer preserves `(T,H,W)`.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, he_init, ConvSpec, LayerParams, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ASYMM_BRANCHES: [usize; 5] = [1, 3, 5, 7, 9];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
    InceptionResidual,
    AsymmInceptionResidual {
        branch_sizes: Vec<usize>,
        /// `false` builds each branch as one full `k×k×k` kernel instead of
        /// the three 1D factors; used for parameter comparisons.
        factorized: bool,
    },
    TimeReducer {
        lags: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Splits `total` channels over `parts` branches; the remainder goes to the
/// first branch. Every branch gets at least one channel.
pub fn branch_widths(total: usize, parts: usize) -> Vec<usize> {
    if total < parts {
        return vec![1; parts];
    }
    let mut w = vec![total / parts; parts];
    w[0] += total % parts;
    w
}

fn reducer_width(in_channels: usize) -> usize {
    (in_channels / 2).max(1)
}

/// Kernels `(k,1,1)`, `(1,k,1)`, `(1,1,k)` of one factorized branch.
pub fn asymm_chain_specs(k: usize, in_channels: usize, out_channels: usize) -> Result<[ConvSpec; 3]> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("asymmetric kernel size must be odd, got {k}")));
    }
    Ok([
        ConvSpec::same([k, 1, 1], in_channels, out_channels),
        ConvSpec::same([1, k, 1], out_channels, out_channels),
        ConvSpec::same([1, 1, k], out_channels, out_channels),
    ])
}

/// Applies three consecutive 1D convolutions along T, H and W.
pub fn asymm_conv_chain<T: Scalar>(x: &Tensor<T>, k: usize, params: &[LayerParams<T>; 3]) -> Result<Tensor<T>> {
    let cin = *x.shape().last().expect("rank >= 1");
    let cout = params[0].weights.shape().last().copied().unwrap_or(0);
    let mut specs = asymm_chain_specs(k, cin, cout)?;
    let mut y = x.clone();
    for (spec, p) in specs.iter_mut().zip(params) {
        spec.use_bias = p.bias.is_some();
        y = nn::conv3d(&y, spec, p)?;
    }
    Ok(y)
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("block channels must be positive".into()));
        }
        match &kind {
            BlockKind::AsymmInceptionResidual { branch_sizes, .. } => {
                if branch_sizes.is_empty() {
                    return Err(Error::Config("asymmetric block needs at least one branch".into()));
                }
                if let Some(k) = branch_sizes.iter().find(|&&k| k % 2 == 0) {
                    return Err(Error::Config(format!("asymmetric kernel size must be odd, got {k}")));
                }
            }
            BlockKind::TimeReducer { lags: 0 } => {
                return Err(Error::Config("time reducer needs lags >= 1".into()))
            }
            _ => {}
        }
        Ok(BlockSpec {
            kind,
            in_channels,
            out_channels,
        })
    }

    fn has_projection(&self) -> bool {
        matches!(
            self.kind,
            BlockKind::Residual | BlockKind::InceptionResidual | BlockKind::AsymmInceptionResidual { .. }
        ) && self.in_channels != self.out_channels
    }

    fn has_norm(&self) -> bool {
        matches!(
            self.kind,
            BlockKind::Residual | BlockKind::InceptionResidual | BlockKind::AsymmInceptionResidual { .. }
        )
    }

    /// Every convolution of the block with its name relative to the block.
    pub fn convs(&self) -> Vec<(String, ConvSpec)> {
        let (cin, cout) = (self.in_channels, self.out_channels);
        let k3 = [3, 3, 3];
        let k1 = [1, 1, 1];
        let mut out: Vec<(String, ConvSpec)> = Vec::new();
        match &self.kind {
            BlockKind::Plain => {
                out.push(("conv1".into(), ConvSpec::same(k3, cin, cout)));
                out.push(("conv2".into(), ConvSpec::same(k3, cout, cout)));
            }
            BlockKind::Residual => {
                out.push(("conv1".into(), ConvSpec::same(k3, cin, cout)));
                out.push(("conv2".into(), ConvSpec::same(k3, cout, cout)));
                out.push(("conv3".into(), ConvSpec::same(k3, cout, cout)));
            }
            BlockKind::InceptionResidual => {
                let r = reducer_width(cin);
                let w = branch_widths(cout, 3);
                out.push(("a.reduce".into(), ConvSpec::same(k1, cin, r)));
                out.push(("a.conv".into(), ConvSpec::same(k1, r, w[0])));
                out.push(("b.reduce".into(), ConvSpec::same(k1, cin, r)));
                out.push(("b.conv".into(), ConvSpec::same(k3, r, w[1])));
                out.push(("c.reduce".into(), ConvSpec::same(k1, cin, r)));
                out.push(("c.conv1".into(), ConvSpec::same(k3, r, w[2])));
                out.push(("c.conv2".into(), ConvSpec::same(k3, w[2], w[2])));
                out.push(("combine".into(), ConvSpec::same(k1, w.iter().sum(), cout)));
            }
            BlockKind::AsymmInceptionResidual {
                branch_sizes,
                factorized,
            } => {
                let w = branch_widths(cout, branch_sizes.len());
                for (i, (&k, &wi)) in branch_sizes.iter().zip(&w).enumerate() {
                    if *factorized {
                        let specs = asymm_chain_specs(k, cin, wi).expect("validated odd sizes");
                        for (axis, spec) in ["t", "h", "w"].iter().zip(specs) {
                            out.push((format!("b{i}.{axis}"), spec));
                        }
                    } else {
                        out.push((format!("b{i}.full"), ConvSpec::same([k, k, k], cin, wi)));
                    }
                }
                out.push(("combine".into(), ConvSpec::same(k1, w.iter().sum(), cout)));
            }
            BlockKind::TimeReducer { lags } => {
                out.push(("conv".into(), nn::time_reduce_spec(*lags, cin, cout)));
            }
        }
        if self.has_projection() {
            out.push(("proj".into(), ConvSpec::same(k1, cin, cout)));
        }
        out
    }

    pub fn norms(&self) -> Vec<String> {
        if self.has_norm() {
            vec!["bn".into()]
        } else {
            Vec::new()
        }
    }

    pub fn conv_count(&self) -> usize {
        self.convs().len()
    }

    /// Trainable scalars: convolution weights and biases plus BN scale/shift.
    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, s)| s.param_count()).sum::<usize>()
            + self.norms().len() * 2 * self.out_channels
    }

    /// Output `(T, H, W, C)` for an input `(T, H, W, C_in)`.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        if input[3] != self.in_channels {
            return Err(Error::Shape(format!(
                "block expects {} channels, got {}",
                self.in_channels, input[3]
            )));
        }
        let t = match self.kind {
            BlockKind::TimeReducer { lags } if lags != input[0] => {
                return Err(Error::Shape(format!(
                    "time reducer spans {lags} steps, input has {}",
                    input[0]
                )))
            }
            BlockKind::TimeReducer { .. } => 1,
            _ => input[0],
        };
        Ok([t, input[1], input[2], self.out_channels])
    }

    /// He-initialized convolutions (seeds drawn from `rng`) and identity BN
    /// layers, stored under `prefix.`.
    pub fn init<T: Scalar>(
        &self,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
    ) -> Result<()> {
        for (name, spec) in self.convs() {
            let p = he_init::<T>(&spec, rng.random())?;
            params.insert(format!("{prefix}.{name}.weight"), p.weights);
            if let Some(b) = p.bias {
                params.insert(format!("{prefix}.{name}.bias"), b);
            }
        }
        for name in self.norms() {
            let c = self.out_channels;
            params.insert(format!("{prefix}.{name}.gamma"), Tensor::full(&[c], T::one())?);
            params.insert(format!("{prefix}.{name}.beta"), Tensor::zeros(&[c])?);
            buffers.insert(format!("{prefix}.{name}.running_mean"), Tensor::zeros(&[c])?);
            buffers.insert(format!("{prefix}.{name}.running_var"), Tensor::full(&[c], T::one())?);
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, prefix: &str, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let specs: IndexMap<String, ConvSpec> = self.convs().into_iter().collect();
        let conv = |ctx: &mut ForwardCtx<'_, T>, name: &str, x: Var| -> Result<Var> {
            ctx.conv(&format!("{prefix}.{name}"), &specs[name], x)
        };
        let relu = |ctx: &mut ForwardCtx<'_, T>, x: Var| ctx.tape.relu(x);

        let body = match &self.kind {
            BlockKind::Plain => {
                let y = conv(ctx, "conv1", x)?;
                let y = relu(ctx, y);
                let y = conv(ctx, "conv2", y)?;
                return Ok(relu(ctx, y));
            }
            BlockKind::TimeReducer { .. } => return conv(ctx, "conv", x),
            BlockKind::Residual => {
                let y = conv(ctx, "conv1", x)?;
                let y = relu(ctx, y);
                let y = conv(ctx, "conv2", y)?;
                let y = relu(ctx, y);
                conv(ctx, "conv3", y)?
            }
            BlockKind::InceptionResidual => {
                let mut branches = Vec::with_capacity(3);
                for (branch, stages) in [("a", &["conv"][..]), ("b", &["conv"][..]), ("c", &["conv1", "conv2"][..])] {
                    let mut y = conv(ctx, &format!("{branch}.reduce"), x)?;
                    y = relu(ctx, y);
                    for stage in stages {
                        y = conv(ctx, &format!("{branch}.{stage}"), y)?;
                        y = relu(ctx, y);
                    }
                    branches.push(y);
                }
                let cat = ctx.tape.concat(&branches, 4)?;
                conv(ctx, "combine", cat)?
            }
            BlockKind::AsymmInceptionResidual {
                branch_sizes,
                factorized,
            } => {
                let mut branches = Vec::with_capacity(branch_sizes.len());
                for i in 0..branch_sizes.len() {
                    let mut y = x;
                    if *factorized {
                        for axis in ["t", "h", "w"] {
                            y = conv(ctx, &format!("b{i}.{axis}"), y)?;
                        }
                    } else {
                        y = conv(ctx, &format!("b{i}.full"), y)?;
                    }
                    branches.push(relu(ctx, y));
                }
                let cat = ctx.tape.concat(&branches, 4)?;
                conv(ctx, "combine", cat)?
            }
        };
        let normed = ctx.norm(&format!("{prefix}.bn"), body)?;
        let skip = if self.has_projection() {
            conv(ctx, "proj", x)?
        } else {
            x
        };
        let sum = ctx.tape.add(normed, skip)?;
        Ok(relu(ctx, sum))
    }

    /// Evaluates the block on a plain tensor, `(T,H,W,C)` or `(N,T,H,W,C)`.
    pub fn apply<T: Scalar>(
        &self,
        x: &Tensor<T>,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let single = x.ndim() == 4;
        let input = if single {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.reshape(&s)?
        } else {
            x.clone()
        };
        let mut ctx = ForwardCtx::new(Tape::no_grad(), params, buffers, mode, 0);
        let xv = ctx.tape.leaf(input);
        let y = self.forward("block", &mut ctx, xv)?;
        let out = ctx.tape.value(y);
        if single {
            out.reshape(&out.shape()[1..])
        } else {
            Ok(out.clone())
        }
    }
}

/// State threaded through one forward pass: the tape, lazily registered
/// parameter leaves, the dropout RNG and collected batch-norm statistics.
pub struct ForwardCtx<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    buffers: &'a ParamStore<T>,
    vars: IndexMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(tape: Tape<T>, params: &'a ParamStore<T>, buffers: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        ForwardCtx {
            tape,
            params,
            buffers,
            vars: IndexMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.get(name)?.clone());
        self.vars.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn conv(&mut self, name: &str, spec: &ConvSpec, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = if spec.use_bias {
            Some(self.param(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.tape.conv3d(x, w, b, spec)
    }

    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let out = match self.mode {
            Mode::Train => self.tape.batch_norm(x, gamma, beta, None, nn::norm::BN_EPS)?,
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{name}.running_mean"))?;
                let var = self.buffers.get(&format!("{name}.running_var"))?;
                self.tape.batch_norm(x, gamma, beta, Some((mean, var)), nn::norm::BN_EPS)?
            }
        };
        if let Some((m, v)) = out.batch_stats {
            self.bn_stats.push((name.to_owned(), m, v));
        }
        Ok(out.output)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.mode {
            Mode::Train => self.tape.dropout(x, rate, &mut self.rng),
            Mode::Eval => Ok(x),
        }
    }

    /// Parameter leaves registered so far, by name.
    pub fn param_vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn into_parts(self) -> (Tape<T>, IndexMap<String, Var>, Vec<(String, Vec<T>, Vec<T>)>) {
        (self.tape, self.vars, self.bn_stats)
    }
}
