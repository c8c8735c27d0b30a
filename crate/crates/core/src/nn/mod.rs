//! Neural layers on channels-last tensors.
//!
//! The functions here evaluate a single layer on plain tensors, accepting
//! either one sample `(T,H,W,C)` or a batch `(N,T,H,W,C)`. Models use the
//! same kernels through [`Tape`](crate::autograd::Tape).

pub mod conv;
pub mod dropout;
pub mod init;
pub mod norm;
pub(crate) mod pool;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{ConvSpec, LayerParams, Padding};
pub use dropout::DropoutSpec;
pub use init::{he_bound, he_init};
pub use norm::BatchNormState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Runs `f` on a batched view of `input` and restores the caller's rank.
fn batched<T: Scalar>(input: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, crate::autograd::Var) -> Result<crate::autograd::Var>) -> Result<Tensor<T>> {
    let single = match input.ndim() {
        4 => true,
        5 => false,
        _ => {
            return Err(Error::Shape(format!(
                "expected (T,H,W,C) or (N,T,H,W,C), got {:?}",
                input.shape()
            )))
        }
    };
    let mut tape = Tape::no_grad();
    let x = if single {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        tape.leaf(input.reshape(&shape)?)
    } else {
        tape.leaf(input.clone())
    };
    let y = f(&mut tape, x)?;
    let out = tape.value(y);
    if single {
        out.reshape(&out.shape()[1..])
    } else {
        Ok(out.clone())
    }
}

pub fn conv3d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, params: &LayerParams<T>) -> Result<Tensor<T>> {
    params.check(spec)?;
    batched(input, |tape, x| {
        let w = tape.leaf(params.weights.clone());
        let b = params.bias.clone().map(|b| tape.leaf(b));
        tape.conv3d(x, w, b, spec)
    })
}

/// Spec of the `L×1×1` valid convolution that collapses `lags` time steps.
pub fn time_reduce_spec(lags: usize, in_channels: usize, out_channels: usize) -> ConvSpec {
    ConvSpec::new([lags, 1, 1], in_channels, out_channels, Padding::Valid)
}

/// Learned weighted average over the temporal axis: `(L,H,W,C) → (1,H,W,C')`.
pub fn time_reduce_conv<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let ws = params.weights.shape();
    if ws.len() != 5 || ws[1] != 1 || ws[2] != 1 {
        return Err(Error::Shape(format!("time reducer weights must be (L,1,1,Cin,Cout), got {ws:?}")));
    }
    let lags = input.shape()[input.ndim().saturating_sub(4)];
    if ws[0] != lags {
        return Err(Error::Shape(format!(
            "time reducer kernel spans {} steps but the input has {lags}",
            ws[0]
        )));
    }
    let mut spec = time_reduce_spec(lags, ws[3], ws[4]);
    spec.use_bias = params.bias.is_some();
    conv3d(input, &spec, params)
}

pub fn maxpool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    batched(input, |tape, x| tape.maxpool(x))
}

pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    batched(input, |tape, x| tape.upsample(x))
}

/// Batch normalization; in train mode the running statistics of `state`
/// are updated from the batch.
pub fn batchnorm<T: Scalar>(input: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    let channels = *input.shape().last().expect("rank >= 1");
    if channels != state.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {channels}",
            state.channels()
        )));
    }
    let mut tape = Tape::no_grad();
    let x = tape.leaf(input.clone());
    let g = tape.leaf(state.gamma.clone());
    let b = tape.leaf(state.beta.clone());
    let out = match state.mode {
        Mode::Train => tape.batch_norm(x, g, b, None, state.eps)?,
        Mode::Eval => tape.batch_norm(x, g, b, Some((&state.running_mean, &state.running_var)), state.eps)?,
    };
    if let Some((mean, var)) = &out.batch_stats {
        state.update_running(mean, var);
    }
    Ok(tape.value(out.output).clone())
}

pub fn dropout<T: Scalar>(input: &Tensor<T>, spec: &DropoutSpec, mode: Mode) -> Result<Tensor<T>> {
    dropout::check_rate(spec.rate)?;
    if mode == Mode::Eval || spec.rate == 0.0 {
        return Ok(input.clone());
    }
    let mut tape = Tape::no_grad();
    let x = tape.leaf(input.clone());
    let y = tape.dropout(x, spec.rate, &mut spec.rng())?;
    Ok(tape.value(y).clone())
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v < T::zero() { T::zero() } else { v })
}
