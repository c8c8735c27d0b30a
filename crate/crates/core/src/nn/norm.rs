//! Per-channel batch normalization over channels-last data.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Affine parameters, running statistics and mode of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: Mode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average update with a batch's statistics.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = T::of(self.momentum);
        let one_m = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (m * *r + one_m * b).max(T::zero());
        }
    }
}

/// Forward results kept for the backward pass.
pub(crate) struct NormForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and (biased) variance, in train mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

pub(crate) enum NormStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    stats: NormStats<'_, T>,
    eps: f64,
) -> Result<NormForward<T>> {
    if channels == 0 || x.len() % channels != 0 || gamma.len() != channels || beta.len() != channels {
        return Err(Error::Shape(format!(
            "batch norm over {channels} channels got {} values and {} scales",
            x.len(),
            gamma.len()
        )));
    }
    let count = x.len() / channels;
    if count == 0 {
        return Err(Error::Contract("batch norm of an empty batch".into()));
    }
    let eps = T::of(eps);
    let (mean, var, batch_stats) = match stats {
        NormStats::Batch => {
            let inv_count = T::one() / T::of(count as f64);
            let mut mean = vec![T::zero(); channels];
            for row in x.chunks_exact(channels) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m * inv_count);
            let mut var = vec![T::zero(); channels];
            for row in x.chunks_exact(channels) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s = *s + d * d;
                }
            }
            var.iter_mut().for_each(|s| *s = *s * inv_count);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        NormStats::Running { mean, var } => {
            if mean.len() != channels || var.len() != channels {
                return Err(Error::Shape("running statistics width".into()));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(channels) {
        for c in 0..channels {
            let h = (row[c] - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(gamma[c] * h + beta[c]);
        }
    }
    Ok(NormForward {
        y,
        xhat,
        inv_std,
        batch_stats,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    gamma: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = gamma.len();
    let count = dy.len() / channels;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for (g_row, h_row) in dy.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            dgamma[c] = dgamma[c] + g_row[c] * h_row[c];
            dbeta[c] = dbeta[c] + g_row[c];
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    if batch_stats {
        // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
        let m = T::of(count as f64);
        let inv_m = T::one() / m;
        for (g_row, h_row) in dy.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
            for c in 0..channels {
                let scale = gamma[c] * inv_std[c] * inv_m;
                dx.push(scale * (m * g_row[c] - dbeta[c] - h_row[c] * dgamma[c]));
            }
        }
    } else {
        for g_row in dy.chunks_exact(channels) {
            for c in 0..channels {
                dx.push(g_row[c] * gamma[c] * inv_std[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}
