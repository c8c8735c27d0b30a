//! `1×2×2` max pooling and nearest-neighbour upsampling on `(N,T,H,W,C)`.
//! Both leave the temporal axis untouched.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Returns the pooled values and, per output element, the flat input index
/// of the maximum (first occurrence in scan order on ties).
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], shape: &[usize]) -> Result<(Vec<T>, Vec<usize>, [usize; 5])> {
    let [n, t, h, w, c] = five(shape)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let out_len = n * t * ho * wo * c;
    let mut out = Vec::with_capacity(out_len);
    let mut arg = Vec::with_capacity(out_len);
    for plane in 0..n * t {
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let mut best_idx = ((plane * h + 2 * i) * w + 2 * j) * c + ch;
                    let mut best = x[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((plane * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        // strict comparison keeps the first maximum
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((out, arg, [n, t, ho, wo, c]))
}

pub(crate) fn maxpool_backward<T: Scalar>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] = dx[i] + g;
    }
    dx
}

pub(crate) fn upsample_forward<T: Scalar>(x: &[T], shape: &[usize]) -> Result<(Vec<T>, [usize; 5])> {
    let [n, t, h, w, c] = five(shape)?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * t * ho * wo * c];
    for plane in 0..n * t {
        for i in 0..ho {
            for j in 0..wo {
                let src = ((plane * h + i / 2) * w + j / 2) * c;
                let dst = ((plane * ho + i) * wo + j) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    Ok((out, [n, t, ho, wo, c]))
}

pub(crate) fn upsample_backward<T: Scalar>(dy: &[T], input_shape: &[usize]) -> Vec<T> {
    let (n, t, h, w, c) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * t * h * w * c];
    for plane in 0..n * t {
        for i in 0..ho {
            for j in 0..wo {
                let dst = ((plane * h + i / 2) * w + j / 2) * c;
                let src = ((plane * ho + i) * wo + j) * c;
                for (d, &g) in dx[dst..dst + c].iter_mut().zip(&dy[src..src + c]) {
                    *d = *d + g;
                }
            }
        }
    }
    dx
}

fn five(shape: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape)
        .map_err(|_| Error::Shape(format!("expected (N,T,H,W,C), got {shape:?}")))
}
