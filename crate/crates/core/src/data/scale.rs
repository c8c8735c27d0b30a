//! Per-variable min-max scaling of sea cells into `[0.1, 1]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::GridSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCALE_LOW: f64 = 0.1;
pub const SCALE_HIGH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    pub fn n_vars(&self) -> usize {
        self.min.len()
    }

    pub fn scale(&self, var: usize, x: f64) -> f64 {
        SCALE_LOW + (x - self.min[var]) * (SCALE_HIGH - SCALE_LOW) / (self.max[var] - self.min[var])
    }

    pub fn unscale(&self, var: usize, y: f64) -> f64 {
        self.min[var] + (y - SCALE_LOW) * (self.max[var] - self.min[var]) / (SCALE_HIGH - SCALE_LOW)
    }
}

/// Min and max of each variable over sea cells of steps `train`.
pub fn fit_scaler(series: &GridSeries, train: Range<usize>) -> Result<ScalerParams> {
    if train.is_empty() || train.end > series.steps() {
        return Err(Error::Data(format!(
            "training range {train:?} empty or outside 0..{}",
            series.steps()
        )));
    }
    let v = series.n_vars();
    let mut min = vec![f64::INFINITY; v];
    let mut max = vec![f64::NEG_INFINITY; v];
    for step in train {
        let frame = series.frame(step);
        for (cell, &m) in series.mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            for k in 0..v {
                let x = frame[cell * v + k] as f64;
                min[k] = min[k].min(x);
                max[k] = max[k].max(x);
            }
        }
    }
    for k in 0..v {
        if !(max[k] > min[k]) {
            return Err(Error::Data(format!(
                "variable `{}` has a degenerate range over sea cells",
                series.variables[k]
            )));
        }
    }
    Ok(ScalerParams { min, max })
}

fn check_vars(series: &GridSeries, params: &ScalerParams) -> Result<()> {
    if params.n_vars() != series.n_vars() {
        return Err(Error::Data(format!(
            "scaler has {} variables, series has {}",
            params.n_vars(),
            series.n_vars()
        )));
    }
    Ok(())
}

fn map_sea(values: &mut [f32], mask: &[u8], v: usize, f: impl Fn(usize, f64) -> f64) {
    let cells = mask.len();
    for (i, x) in values.iter_mut().enumerate() {
        let cell = (i / v) % cells;
        *x = if mask[cell] == 1 { f(i % v, *x as f64) as f32 } else { 0.0 };
    }
}

/// Scales sea cells and zeroes land; values outside the fitted range are
/// mapped linearly, not clamped.
pub fn apply_scale(series: &GridSeries, params: &ScalerParams) -> Result<GridSeries> {
    check_vars(series, params)?;
    let mut out = series.clone();
    map_sea(out.values.data_mut(), &series.mask, series.n_vars(), |k, x| params.scale(k, x));
    Ok(out)
}

pub fn inverse_scale(series: &GridSeries, params: &ScalerParams) -> Result<GridSeries> {
    check_vars(series, params)?;
    let mut out = series.clone();
    out.values = inverse_scale_tensor(&series.values, &series.mask, params)?;
    Ok(out)
}

/// Inverse scaling of any tensor whose trailing axes are `(H, W, V)`.
pub fn inverse_scale_tensor(values: &Tensor<f32>, mask: &[u8], params: &ScalerParams) -> Result<Tensor<f32>> {
    let shape = values.shape();
    let n = shape.len();
    if n < 3 || shape[n - 1] != params.n_vars() || shape[n - 3] * shape[n - 2] != mask.len() {
        return Err(Error::Shape(format!(
            "cannot unscale {shape:?} with {} cells and {} variables",
            mask.len(),
            params.n_vars()
        )));
    }
    let mut out = values.clone();
    map_sea(out.data_mut(), mask, params.n_vars(), |k, y| params.unscale(k, y));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let p = ScalerParams {
            min: vec![0.0],
            max: vec![2.0],
        };
        assert_eq!(p.scale(0, 0.0), 0.1);
        assert_eq!(p.scale(0, 2.0), 1.0);
        assert!((p.scale(0, 1.0) - 0.55).abs() < 1e-15);
        assert!((p.unscale(0, p.scale(0, 1.3)) - 1.3).abs() < 1e-15);
    }
}
