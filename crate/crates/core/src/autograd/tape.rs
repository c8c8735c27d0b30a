//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! forward context its derivative needs. [`Tape::backward`] walks the nodes
//! in reverse and returns a fresh [`Gradients`] table; the tape itself is
//! not mutated, so calling it twice yields identical gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{conv3d_backward, conv3d_forward, ConvGeometry, ConvSpec};
use crate::nn::dropout::{check_rate, dropout_mask};
use crate::nn::norm::{batchnorm_backward, batchnorm_forward, NormStats};
use crate::nn::pool::{maxpool_backward, maxpool_forward, upsample_backward, upsample_forward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: usize,
        weights: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Relu(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        input: usize,
        mask: Vec<T>,
    },
    Mse {
        pred: usize,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation. Node inputs always refer to earlier
/// nodes, so the node order is a topological order.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of batch normalization on the tape.
pub struct NormOutput<T> {
    pub output: Var,
    /// Batch mean and biased variance when batch statistics were used.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values only; [`backward`](Tape::backward) on
    /// it is a contract error.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv3d(&mut self, input: Var, weights: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = ConvGeometry::resolve(self.value(input).shape(), spec)?;
        self.value(weights).expect_shape(&spec.weight_shape())?;
        match (bias, spec.use_bias) {
            (Some(b), true) => self.value(b).expect_shape(&[spec.out_channels])?,
            (None, false) => {}
            _ => return Err(Error::Shape("bias presence disagrees with spec".into())),
        }
        let y = conv3d_forward(
            self.value(input).data(),
            self.value(weights).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&geom.output_shape(), y)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                input: input.0,
                weights: weights.0,
                bias: bias.map(|b| b.0),
                geom,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(value, Op::Relu(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x.0, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(value, Op::Mean(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&refs, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// `1×2×2` max pooling of `(N,T,H,W,C)`.
    pub fn maxpool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (y, argmax, shape) = maxpool_forward(t.data(), t.shape())?;
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(value, Op::MaxPool { input: x.0, argmax }))
    }

    /// `1×2×2` nearest-neighbour upsampling of `(N,T,H,W,C)`.
    pub fn upsample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (y, shape) = upsample_forward(t.data(), t.shape())?;
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(value, Op::Upsample(x.0)))
    }

    /// Batch normalization over the last axis. `running` selects eval-mode
    /// statistics; `None` normalizes with the batch's own statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        eps: f64,
    ) -> Result<NormOutput<T>> {
        let input = self.value(x);
        let channels = *input.shape().last().expect("rank >= 1");
        let stats = match running {
            Some((m, v)) => NormStats::Running {
                mean: m.data(),
                var: v.data(),
            },
            None => NormStats::Batch,
        };
        let fwd = batchnorm_forward(
            input.data(),
            channels,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            eps,
        )?;
        let value = Tensor::new(input.shape(), fwd.y)?;
        let batch_stats = running.is_none();
        let output = self.push(
            value,
            Op::BatchNorm {
                input: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats,
            },
        );
        Ok(NormOutput {
            output,
            batch_stats: fwd.batch_stats,
        })
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        check_rate(rate)?;
        if rate == 0.0 {
            return Ok(x);
        }
        let mask: Vec<T> = dropout_mask(self.value(x).len(), rate, rng);
        let value = {
            let t = self.value(x);
            Tensor::new(t.shape(), t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?
        };
        Ok(self.push(value, Op::Dropout { input: x.0, mask }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        target.expect_shape(p.shape())?;
        let n = T::of(p.len() as f64);
        let sq = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let value = Tensor::scalar(sq / n);
        Ok(self.push(
            value,
            Op::Mse {
                pred: pred.0,
                target: target.clone(),
            },
        ))
    }

    /// Reverse-mode gradients of the scalar `root` with respect to every
    /// node. Nodes that do not influence `root` get no entry (read as zero).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Contract("backward on a tape recorded without gradients".into()));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // intermediate gradients are released once propagated
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Conv3d {
                    input,
                    weights,
                    bias,
                    geom,
                } => {
                    let x = &self.nodes[*input].value;
                    let w = &self.nodes[*weights].value;
                    let cg = conv3d_backward(x.data(), w.data(), &g, geom, true);
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *input, dx);
                    }
                    accumulate(&mut grads, *weights, cg.weights);
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, cg.bias);
                    }
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let da = g.iter().zip(bv).map(|(&gi, &v)| gi * v).collect();
                    let db = g.iter().zip(av).map(|(&gi, &v)| gi * v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads, *x, g.iter().map(|&v| v * *f).collect());
                }
                Op::Sum(x) => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![g[0] / T::of(n as f64); n]);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut parts: Vec<Vec<T>> = inputs
                        .iter()
                        .map(|&i| Vec::with_capacity(self.nodes[i].value.len()))
                        .collect();
                    let mut off = 0;
                    for _ in 0..outer {
                        for (part, &i) in parts.iter_mut().zip(inputs) {
                            let block = self.nodes[i].value.shape()[*axis] * inner;
                            part.extend_from_slice(&g[off..off + block]);
                            off += block;
                        }
                    }
                    for (part, &i) in parts.into_iter().zip(inputs) {
                        accumulate(&mut grads, i, part);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let n = self.nodes[*input].value.len();
                    accumulate(&mut grads, *input, maxpool_backward(&g, argmax, n));
                }
                Op::Upsample(x) => {
                    let shape = self.nodes[*x].value.shape();
                    accumulate(&mut grads, *x, upsample_backward(&g, shape));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gv = self.nodes[*gamma].value.data();
                    let (dx, dgamma, dbeta) = batchnorm_backward(&g, xhat, gv, inv_std, *batch_stats);
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Dropout { input, mask } => {
                    let dx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(&mut grads, *input, dx);
                }
                Op::Mse { pred, target } => {
                    let p = self.nodes[*pred].value.data();
                    let scale = g[0] * T::of(2.0 / p.len() as f64);
                    let dp = p
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| scale * (a - b))
                        .collect();
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass, indexed by [`Var`]. Entries exist for
/// leaves that influence the root.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` does not reach the root.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| {
            Tensor::zeros(tape.value(v).shape()).expect("tape values are well-formed")
        })
    }
}
