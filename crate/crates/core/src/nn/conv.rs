//! 3D convolution (cross-correlation) over channels-last `(N,T,H,W,C)` data.
//!
//! The forward pass lowers each `(sample, output time)` slice to an im2col
//! matrix and a GEMM against the weight matrix `(kt·kh·kw·Cin, Cout)`.
//! Temporal taps that fall entirely into padding are skipped by narrowing
//! the GEMM's inner dimension, which keeps the decoder (temporal extent 1)
//! as cheap as a 2D convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that preserves every extent; odd remainders go to the
    /// high-index side.
    Same,
    /// No padding; extent `d` becomes `d - k + 1`.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3], in_channels: usize, out_channels: usize, padding: Padding) -> Self {
        ConvSpec {
            kernel,
            in_channels,
            out_channels,
            padding,
            use_bias: true,
        }
    }

    pub fn same(kernel: [usize; 3], in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(kernel, in_channels, out_channels, Padding::Same)
    }

    pub fn without_bias(mut self) -> Self {
        self.use_bias = false;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [kt, kh, kw, self.in_channels, self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.fan_in() * self.out_channels + if self.use_bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output `(T', H', W')` for an input of extents `(T, H, W)`.
    pub fn output_extents(&self, extents: [usize; 3]) -> Result<[usize; 3]> {
        match self.padding {
            Padding::Same => Ok(extents),
            Padding::Valid => {
                let mut out = [0; 3];
                for i in 0..3 {
                    if extents[i] < self.kernel[i] {
                        return Err(Error::Shape(format!(
                            "valid convolution needs extent >= kernel, got {extents:?} for kernel {:?}",
                            self.kernel
                        )));
                    }
                    out[i] = extents[i] - self.kernel[i] + 1;
                }
                Ok(out)
            }
        }
    }
}

/// Trainable parameters of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    /// `(kt, kh, kw, Cin, Cout)`.
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        self.weights.expect_shape(&spec.weight_shape())?;
        match (&self.bias, spec.use_bias) {
            (Some(b), true) => b.expect_shape(&[spec.out_channels]),
            (None, false) => Ok(()),
            _ => Err(Error::Shape("bias presence disagrees with spec".into())),
        }
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub cin: usize,
    pub kernel: [usize; 3],
    pub cout: usize,
    /// Low-side padding per axis.
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn resolve(input_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        if input_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects (N,T,H,W,C), got {input_shape:?}"
            )));
        }
        let cin = input_shape[4];
        if cin != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv3d expects {} input channels, got {cin}",
                spec.in_channels
            )));
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        let output = spec.output_extents(input)?;
        let pad = match spec.padding {
            Padding::Same => spec.kernel.map(|k| (k - 1) / 2),
            Padding::Valid => [0; 3],
        };
        Ok(ConvGeometry {
            batch: input_shape[0],
            input,
            cin,
            kernel: spec.kernel,
            cout: spec.out_channels,
            pad,
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [t, h, w] = self.output;
        [self.batch, t, h, w, self.cout]
    }

    fn taps_per_time(&self) -> usize {
        self.kernel[1] * self.kernel[2] * self.cin
    }

    /// Kernel time taps `[lo, hi)` that read real (unpadded) input for
    /// output time `to`.
    fn time_taps(&self, to: usize) -> (usize, usize) {
        let pad = self.pad[0] as isize;
        let t = self.input[0] as isize;
        let to = to as isize;
        let lo = (pad - to).max(0);
        let hi = (t + pad - to).min(self.kernel[0] as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn rows_per_block(&self, inner: usize) -> usize {
        const COL_BUDGET: usize = 1 << 18;
        let plane = self.output[1] * self.output[2];
        (COL_BUDGET / inner.max(1)).clamp(1, plane)
    }

    /// Fills `col` with the im2col rows `[r0, r1)` of output plane `to` of
    /// sample `n`, restricted to time taps `[lo, hi)`.
    fn im2col<T: Scalar>(&self, x: &[T], n: usize, to: usize, taps: (usize, usize), r0: usize, r1: usize, col: &mut [T]) {
        let [ti_n, hi_n, wi_n] = self.input;
        let [kt_lo, kt_hi] = [taps.0, taps.1];
        let [_, kh, kw] = self.kernel;
        let wo_n = self.output[2];
        let cin = self.cin;
        let inner = (kt_hi - kt_lo) * self.taps_per_time();
        for (r, row) in (r0..r1).zip(col.chunks_exact_mut(inner)) {
            let (ho, wo) = (r / wo_n, r % wo_n);
            let mut dst = 0;
            for dt in kt_lo..kt_hi {
                let ti = to + dt - self.pad[0];
                debug_assert!(ti < ti_n);
                for dh in 0..kh {
                    let hi = (ho + dh) as isize - self.pad[1] as isize;
                    if hi < 0 || hi >= hi_n as isize {
                        row[dst..dst + kw * cin].fill(T::zero());
                        dst += kw * cin;
                        continue;
                    }
                    let base = ((n * ti_n + ti) * hi_n + hi as usize) * wi_n;
                    for dw in 0..kw {
                        let wi = (wo + dw) as isize - self.pad[2] as isize;
                        if wi < 0 || wi >= wi_n as isize {
                            row[dst..dst + cin].fill(T::zero());
                        } else {
                            let src = (base + wi as usize) * cin;
                            row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                        dst += cin;
                    }
                }
            }
        }
    }

    /// Scatter-adds im2col rows back into the input-gradient slice of one
    /// sample (`dx` is that sample's `(T,H,W,C)` block).
    fn col2im<T: Scalar>(&self, dcol: &[T], to: usize, taps: (usize, usize), r0: usize, r1: usize, dx: &mut [T]) {
        let [_, hi_n, wi_n] = self.input;
        let [_, kh, kw] = self.kernel;
        let wo_n = self.output[2];
        let cin = self.cin;
        let inner = (taps.1 - taps.0) * self.taps_per_time();
        for (r, row) in (r0..r1).zip(dcol.chunks_exact(inner)) {
            let (ho, wo) = (r / wo_n, r % wo_n);
            let mut src = 0;
            for dt in taps.0..taps.1 {
                let ti = to + dt - self.pad[0];
                for dh in 0..kh {
                    let hi = (ho + dh) as isize - self.pad[1] as isize;
                    if hi < 0 || hi >= hi_n as isize {
                        src += kw * cin;
                        continue;
                    }
                    let base = (ti * hi_n + hi as usize) * wi_n;
                    for dw in 0..kw {
                        let wi = (wo + dw) as isize - self.pad[2] as isize;
                        if wi >= 0 && wi < wi_n as isize {
                            let dst = (base + wi as usize) * cin;
                            for (d, &g) in dx[dst..dst + cin].iter_mut().zip(&row[src..src + cin]) {
                                *d = *d + g;
                            }
                        }
                        src += cin;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let [to_n, ho_n, wo_n] = g.output;
    let plane = ho_n * wo_n;
    let cout = g.cout;
    let mut out = vec![T::zero(); g.batch * to_n * plane * cout];
    let per_time = g.taps_per_time();
    exec::for_each_chunk_mut(&mut out, plane * cout, |unit, y| {
        let (n, to) = (unit / to_n, unit % to_n);
        let taps = g.time_taps(to);
        let inner = (taps.1 - taps.0) * per_time;
        if inner > 0 {
            let wsub = &w[taps.0 * per_time * cout..taps.1 * per_time * cout];
            let rb = g.rows_per_block(inner);
            let mut col = vec![T::zero(); rb * inner];
            let mut r0 = 0;
            while r0 < plane {
                let r1 = (r0 + rb).min(plane);
                let col = &mut col[..(r1 - r0) * inner];
                g.im2col(x, n, to, taps, r0, r1, col);
                gemm(
                    MatRef::row_major(col, r1 - r0, inner),
                    MatRef::row_major(wsub, inner, cout),
                    T::zero(),
                    &mut y[r0 * cout..r1 * cout],
                );
                r0 = r1;
            }
        }
        if let Some(b) = bias {
            for row in y.chunks_exact_mut(cout) {
                for (v, &bb) in row.iter_mut().zip(b) {
                    *v = *v + bb;
                }
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let [to_n, ho_n, wo_n] = g.output;
    let plane = ho_n * wo_n;
    let cout = g.cout;
    let per_time = g.taps_per_time();
    let sample_in = g.input.iter().product::<usize>() * g.cin;
    let sample_out = to_n * plane * cout;

    let partials = exec::map_units(g.batch, |n| {
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); cout];
        let mut dx = need_input.then(|| vec![T::zero(); sample_in]);
        let dy_n = &dy[n * sample_out..(n + 1) * sample_out];
        for row in dy_n.chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        for to in 0..to_n {
            let taps = g.time_taps(to);
            let inner = (taps.1 - taps.0) * per_time;
            if inner == 0 {
                continue;
            }
            let wrange = taps.0 * per_time * cout..taps.1 * per_time * cout;
            let rb = g.rows_per_block(inner);
            let mut col = vec![T::zero(); rb * inner];
            let mut dcol = vec![T::zero(); rb * inner];
            let mut r0 = 0;
            while r0 < plane {
                let r1 = (r0 + rb).min(plane);
                let rows = r1 - r0;
                let dy_blk = &dy_n[(to * plane + r0) * cout..(to * plane + r1) * cout];
                let col = &mut col[..rows * inner];
                g.im2col(x, n, to, taps, r0, r1, col);
                gemm(
                    MatRef::row_major(col, rows, inner).t(),
                    MatRef::row_major(dy_blk, rows, cout),
                    T::one(),
                    &mut dw[wrange.clone()],
                );
                if let Some(dx) = dx.as_mut() {
                    let dcol = &mut dcol[..rows * inner];
                    gemm(
                        MatRef::row_major(dy_blk, rows, cout),
                        MatRef::row_major(&w[wrange.clone()], inner, cout).t(),
                        T::zero(),
                        dcol,
                    );
                    g.col2im(dcol, to, taps, r0, r1, dx);
                }
                r0 = r1;
            }
        }
        (dx, dw, db)
    });

    let mut weights = vec![T::zero(); w.len()];
    let mut bias = vec![T::zero(); cout];
    let mut input = need_input.then(|| Vec::with_capacity(g.batch * sample_in));
    for (dx, dw, db) in partials {
        for (a, b) in weights.iter_mut().zip(dw) {
            *a = *a + b;
        }
        for (a, b) in bias.iter_mut().zip(db) {
            *a = *a + b;
        }
        if let (Some(all), Some(dx)) = (input.as_mut(), dx) {
            all.extend(dx);
        }
    }
    ConvGrads { input, weights, bias }
}
