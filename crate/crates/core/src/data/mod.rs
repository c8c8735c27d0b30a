//! Gridded time series: container I/O, masking, scaling, windowing and
//! seasonal splits.

pub(crate) mod container;
mod scale;
mod split;
mod synth;

use chrono::{DateTime, Duration, Utc};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Dataset;

pub use container::{read_container, write_container, CONTAINER_MAGIC};
pub use scale::{apply_scale, fit_scaler, inverse_scale, inverse_scale_tensor, ScalerParams, SCALE_HIGH, SCALE_LOW};
pub use split::{make_windows, split_by_dates, DateRange, Season, SeasonRange, SplitIndices, SplitSpec, WindowSpec};
pub use synth::{synth_generate, SYNTH_VARIABLES};

/// Values `(L, H, W, V)` on a regular UTC time axis with a land mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSeries {
    pub values: Tensor<f32>,
    pub start_time: DateTime<Utc>,
    pub step_seconds: u64,
    pub variables: Vec<String>,
    /// `H·W` cells, 1 = sea, 0 = land.
    pub mask: Vec<u8>,
}

impl GridSeries {
    pub fn new(
        values: Tensor<f32>,
        start_time: DateTime<Utc>,
        step_seconds: u64,
        variables: Vec<String>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        let s = GridSeries {
            values,
            start_time,
            step_seconds,
            variables,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.values.shape();
        if shape.len() != 4 {
            return Err(Error::Data(format!("series values must be (L,H,W,V), got {shape:?}")));
        }
        if self.step_seconds == 0 {
            return Err(Error::Data("step_seconds must be positive".into()));
        }
        if self.variables.len() != shape[3] {
            return Err(Error::Data(format!(
                "{} variable names for {} variables",
                self.variables.len(),
                shape[3]
            )));
        }
        if self.mask.len() != shape[1] * shape[2] {
            return Err(Error::Data(format!(
                "mask has {} cells, grid has {}",
                self.mask.len(),
                shape[1] * shape[2]
            )));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Data("mask cells must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.height() * self.width() * self.n_vars()
    }

    pub fn frame(&self, step: usize) -> &[f32] {
        let n = self.frame_len();
        &self.values.data()[step * n..(step + 1) * n]
    }

    pub fn time_of(&self, step: usize) -> DateTime<Utc> {
        self.start_time + Duration::seconds((step as u64 * self.step_seconds) as i64)
    }

    /// Step index of `t`, which may equal the end of the series.
    pub fn index_of(&self, t: DateTime<Utc>) -> Result<usize> {
        let offset = (t - self.start_time).num_seconds();
        let step = self.step_seconds as i64;
        if offset < 0 || offset % step != 0 || (offset / step) as usize > self.steps() {
            return Err(Error::Data(format!(
                "{} is not a step boundary within {} .. {}",
                t.to_rfc3339(),
                self.start_time.to_rfc3339(),
                self.time_of(self.steps()).to_rfc3339()
            )));
        }
        Ok((offset / step) as usize)
    }

    pub fn is_sea(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width() + col] == 1
    }

    /// Zeroes every land cell in every step and variable.
    pub fn apply_mask(&mut self) {
        let v = self.n_vars();
        let mask = self.mask.clone();
        let frame = self.frame_len();
        for chunk in self.values.data_mut().chunks_mut(frame) {
            for (cell, &m) in mask.iter().enumerate() {
                if m == 0 {
                    chunk[cell * v..(cell + 1) * v].fill(0.0);
                }
            }
        }
    }

    /// Keeps rows `0..height` and columns `0..width`.
    pub fn crop_spatial(&self, height: usize, width: usize) -> Result<GridSeries> {
        let (l, h, w, v) = (self.steps(), self.height(), self.width(), self.n_vars());
        if height > h || width > w || height == 0 || width == 0 {
            return Err(Error::Bounds(format!("cannot crop {h}×{w} to {height}×{width}")));
        }
        let values = self.values.crop(&[0..l, 0..height, 0..width, 0..v])?;
        let mask = (0..height)
            .flat_map(|r| self.mask[r * w..r * w + width].iter().copied())
            .collect();
        GridSeries::new(values, self.start_time, self.step_seconds, self.variables.clone(), mask)
    }

    /// Input `(d,H,W,V)` and target `(1,H,W,V)` of the window starting at `start`.
    pub fn window(&self, spec: &WindowSpec, start: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let target = spec.target_index(start);
        if target >= self.steps() {
            return Err(Error::Bounds(format!(
                "window at {start} targets step {target} of {}",
                self.steps()
            )));
        }
        let (h, w, v) = (self.height(), self.width(), self.n_vars());
        let n = self.frame_len();
        let input = Tensor::new(
            &[spec.lags, h, w, v],
            self.values.data()[start * n..(start + spec.lags) * n].to_vec(),
        )?;
        let target = Tensor::new(&[1, h, w, v], self.frame(target).to_vec())?;
        Ok((input, target))
    }
}

/// Samples drawn from a series by window start index.
#[derive(Clone, Debug)]
pub struct WindowDataset<'a> {
    pub series: &'a GridSeries,
    pub spec: WindowSpec,
    pub starts: Vec<usize>,
}

impl<'a> WindowDataset<'a> {
    pub fn new(series: &'a GridSeries, spec: WindowSpec, starts: Vec<usize>) -> Result<Self> {
        if let Some(&last) = starts.iter().max() {
            if spec.target_index(last) >= series.steps() {
                return Err(Error::Bounds(format!("window start {last} runs past the series")));
            }
        }
        Ok(WindowDataset { series, spec, starts })
    }
}

impl Dataset for WindowDataset<'_> {
    fn len(&self) -> usize {
        self.starts.len()
    }

    fn batch(&self, ids: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut inputs = Vec::with_capacity(ids.len());
        let mut targets = Vec::with_capacity(ids.len());
        for &i in ids {
            let start = *self
                .starts
                .get(i)
                .ok_or_else(|| Error::Bounds(format!("sample {i} of {}", self.starts.len())))?;
            let (x, y) = self.series.window(&self.spec, start)?;
            inputs.push(x);
            targets.push(y);
        }
        Ok((
            Tensor::stack(&inputs.iter().collect::<Vec<_>>())?,
            Tensor::stack(&targets.iter().collect::<Vec<_>>())?,
        ))
    }
}
