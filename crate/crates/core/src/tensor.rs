//! Dense row-major tensors.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense, row-major, immutable-shape tensor.
///
/// Values live behind an `Arc`, so clones and [`reshape`](Tensor::reshape)
/// share storage; mutation goes through [`data_mut`](Tensor::data_mut),
/// which copies on write when shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape("tensor needs at least one axis".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "extent of axis {axis} is zero in {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count of {shape:?} overflows")))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = checked_len(shape)?;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = checked_len(shape)?;
        Tensor::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = checked_len(shape)?;
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let off = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[off]
    }

    /// New descriptor over the same values.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = checked_len(shape)?;
        if n != self.len() {
            return Err(Error::SizeMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: self.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max)
        })
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool
    where
        T: Bits,
    {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub(crate) fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(inputs: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let ndim = first.ndim();
        if axis >= ndim {
            return Err(Error::Shape(format!("axis {axis} out of range for rank {ndim}")));
        }
        for t in inputs {
            let agree = t.ndim() == ndim
                && (0..ndim).all(|d| d == axis || t.shape[d] == first.shape[d]);
            if !agree {
                return Err(Error::Shape(format!(
                    "cannot concat {:?} with {:?} on axis {axis}",
                    first.shape, t.shape
                )));
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = inputs.iter().map(|t| t.shape[axis]).sum();
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for t in inputs {
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        Tensor::new(&shape, data)
    }

    /// Copies the sub-tensor selected by per-axis half-open ranges.
    pub fn crop(&self, ranges: &[Range<usize>]) -> Result<Self> {
        if ranges.len() != self.ndim() {
            return Err(Error::Shape(format!(
                "{} ranges for a rank-{} tensor",
                ranges.len(),
                self.ndim()
            )));
        }
        for (axis, (r, &d)) in ranges.iter().zip(&self.shape).enumerate() {
            if r.start >= r.end || r.end > d {
                return Err(Error::Bounds(format!(
                    "range {r:?} on axis {axis} with extent {d}"
                )));
            }
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let strides = self.strides();
        let ndim = self.ndim();
        let last = &ranges[ndim - 1];
        let mut data = Vec::with_capacity(shape.iter().product());
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        loop {
            let base: usize = idx[..ndim - 1]
                .iter()
                .zip(&strides)
                .map(|(i, s)| i * s)
                .sum();
            data.extend_from_slice(&self.data[base + last.start..base + last.end]);
            // odometer over all axes but the last
            let mut axis = ndim - 1;
            loop {
                if axis == 0 {
                    return Tensor::new(&shape, data);
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < ranges[axis].end {
                    break;
                }
                idx[axis] = ranges[axis].start;
            }
        }
    }

    /// Slices `index` along axis 0, dropping that axis (or keeping it with
    /// extent 1 for rank-1 tensors).
    pub fn index_axis0(&self, index: usize) -> Result<Self> {
        let d0 = self.shape[0];
        if index >= d0 {
            return Err(Error::Bounds(format!("index {index} on axis 0 with extent {d0}")));
        }
        let inner = self.len() / d0;
        let shape = if self.ndim() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Tensor::new(&shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(inputs: &[&Tensor<T>]) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * inputs.len());
        for t in inputs {
            t.expect_shape(first.shape())?;
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(&shape, data)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Bit patterns of floats, for bitwise comparisons.
pub trait Bits {
    fn bits(&self) -> u64;
}

impl Bits for f32 {
    fn bits(&self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Bits for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}
