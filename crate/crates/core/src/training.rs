//! MSE training with Adam, best-on-validation checkpointing and the `CCKP`
//! checkpoint format.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::blocks::ForwardCtx;
use crate::data::container::{read_exact, read_u32, read_u64};
use crate::data::{ScalerParams, WindowSpec};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelGraph};
use crate::nn::norm::BN_MOMENTUM;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Indexed supervised samples: inputs `(L,H,W,V)`, targets `(1,H,W,V)`.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks samples `ids` into `(B,L,H,W,V)` inputs and `(B,1,H,W,V)` targets.
    fn batch(&self, ids: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

/// Samples held in memory as two stacked tensors.
#[derive(Clone, Debug)]
pub struct TensorDataset {
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

impl TensorDataset {
    pub fn new(inputs: Tensor<f32>, targets: Tensor<f32>) -> Result<Self> {
        if inputs.ndim() != 5 || targets.ndim() != 5 || inputs.shape()[0] != targets.shape()[0] {
            return Err(Error::Shape(format!(
                "inputs {:?} and targets {:?} must be 5D with equal sample counts",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(TensorDataset { inputs, targets })
    }
}

impl Dataset for TensorDataset {
    fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    fn batch(&self, ids: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let pick = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let parts = ids.iter().map(|&i| t.index_axis0(i)).collect::<Result<Vec<_>>>()?;
            Tensor::stack(&parts.iter().collect::<Vec<_>>())
        };
        Ok((pick(&self.inputs)?, pick(&self.targets)?))
    }
}

/// Mean of squared differences over every element.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    target.expect_shape(pred.shape())?;
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(0.0, |acc, (&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            acc + d * d
        });
    Ok(T::of(sum / pred.len() as f64))
}

fn default_batch() -> usize {
    16
}
fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Stop once the validation MSE falls below this value.
    #[serde(default)]
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            epochs: default_epochs(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
            shuffle: true,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} outside (0,1)")));
            }
        }
        if !(self.learning_rate > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("learning_rate and eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Result<Self> {
        let mut m = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape())?);
        }
        Ok(AdamState { v: m.clone(), m, t: 0 })
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        g.expect_shape(p.shape())?;
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let g = g.as_f64();
            let mi = b1 * m.as_f64() + (1.0 - b1) * g;
            let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::of(mi);
            *v = T::of(vi);
            let update = config.learning_rate * (mi / c1) / ((vi / c2).sqrt() + config.eps);
            *p = T::of(p.as_f64() - update);
        }
    }
    Ok(())
}

/// Loss and gradients of one mini-batch in training mode.
pub struct BatchStep {
    pub loss: f64,
    pub grads: ParamStore<f32>,
    pub bn_stats: crate::models::BatchStats<f32>,
}

pub fn batch_gradients(
    model: &ModelGraph<f32>,
    inputs: Tensor<f32>,
    targets: &Tensor<f32>,
    dropout_seed: u64,
) -> Result<BatchStep> {
    let mut ctx = ForwardCtx::new(Tape::new(), &model.params, &model.buffers, Mode::Train, dropout_seed);
    let x = ctx.tape.leaf(inputs);
    let y = model.trace(&mut ctx, x)?;
    let loss = ctx.tape.mse(y, targets)?;
    let (tape, vars, bn_stats) = ctx.into_parts();
    let value = tape.value(loss).data()[0] as f64;
    let table = tape.backward(loss)?;
    let mut grads = ParamStore::new();
    for (name, p) in model.params.iter() {
        let g = match vars.get(name) {
            Some(&v) => table.wrt(&tape, v),
            None => Tensor::zeros(p.shape())?,
        };
        grads.insert(name, g);
    }
    Ok(BatchStep {
        loss: value,
        grads,
        bn_stats,
    })
}

/// Eval-mode MSE over every element of every sample in `data`.
pub fn evaluate_mse(model: &ModelGraph<f32>, data: &dyn Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.forward(&x, Mode::Eval, 0)?;
        sum += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>();
        count += pred.len();
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the training-mode batch losses.
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` in place; it ends holding the last epoch's parameters.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &dyn Dataset,
    val_set: &dyn Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(&model.params)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        for (batch, ids) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = train_set.batch(ids)?;
            let step = batch_gradients(model, x, &y, rng.random())?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            weighted += step.loss * ids.len() as f64;
            adam_step(&mut model.params, &step.grads, &mut adam, config)?;
            model.update_running_stats(&step.bn_stats, BN_MOMENTUM)?;
        }
        let val_mse = evaluate_mse(model, val_set, config.batch_size)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_mse: weighted / train_set.len() as f64,
            val_mse,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| val_mse < b.val_loss) {
            best = Some(Checkpoint::from_model(model, epoch, val_mse));
        }
        if config.stop_below.is_some_and(|t| val_mse < t) {
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    Ok(TrainOutcome { best, history })
}

/// CSV `epoch,train_mse,val_mse`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e}", r.epoch, r.train_mse, r.val_mse);
    }
    s
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub scaler: Option<ScalerParams>,
    pub window: Option<WindowSpec>,
    pub params: ParamStore<f32>,
    /// Batch-norm running statistics.
    pub buffers: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    val_loss: f64,
    scaler: Option<ScalerParams>,
    window: Option<WindowSpec>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelGraph<f32>, epoch: usize, val_loss: f64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            epoch,
            val_loss,
            scaler: None,
            window: None,
            params: model.params.clone(),
            buffers: model.buffers.clone(),
        }
    }

    /// Rebuilds the model graph and installs the stored tensors.
    pub fn to_model(&self) -> Result<ModelGraph<f32>> {
        let mut model = ModelGraph::build(self.config.clone())?;
        for (store, saved, what) in [
            (&mut model.params, &self.params, "parameter"),
            (&mut model.buffers, &self.buffers, "buffer"),
        ] {
            if store.len() != saved.len() {
                return Err(Error::Format(format!(
                    "checkpoint has {} {what} tensors, model needs {}",
                    saved.len(),
                    store.len()
                )));
            }
            for (name, t) in saved.iter() {
                let slot = store
                    .get_mut(name)
                    .map_err(|_| Error::Format(format!("unexpected {what} `{name}`")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "{what} `{name}` has shape {:?}, model needs {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
            scaler: self.scaler.clone(),
            window: self.window,
        })?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&((self.params.len() + self.buffers.len()) as u32).to_le_bytes());
        w.write_all(&buf).map_err(io)?;
        for (name, t) in self.params.iter().chain(self.buffers.iter()) {
            buf.clear();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected CCKP")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r, "header length")? as usize;
        let mut header = vec![0u8; len];
        read_exact(&mut r, &mut header, "header")?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = read_u32(&mut r, "tensor count")?;
        let reference = ModelGraph::<f32>::build(header.config.clone())?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r, "tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(
                    usize::try_from(read_u64(&mut r, "tensor dims")?)
                        .map_err(|_| Error::Format("dimension overflows usize".into()))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dimensions overflow")))?;
            let expected = reference
                .params
                .get(&name)
                .or_else(|_| reference.buffers.get(&name))
                .map_err(|_| Error::Format(format!("unexpected tensor `{name}`")))?;
            if expected.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {shape:?}, model needs {:?}",
                    expected.shape()
                )));
            }
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut r, &mut raw, "tensor payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if reference.params.contains(&name) {
                params.insert(name, t);
            } else {
                buffers.insert(name, t);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            val_loss: header.val_loss,
            scaler: header.scaler,
            window: header.window,
            params,
            buffers,
        })
    }
}
