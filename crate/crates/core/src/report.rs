//! Evaluation tables, parameter summaries and grayscale image dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{inverse_scale_tensor, GridSeries, ScalerParams, Season, WindowDataset, WindowSpec};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig, ModelGraph};
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::training::Dataset;

/// Squared-error sums of one sample, per variable.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleError {
    pub sum_sq: Vec<f64>,
    pub sea_sum_sq: Vec<f64>,
    /// Pixels per variable, all and sea-only.
    pub pixels: usize,
    pub sea_pixels: usize,
}

impl SampleError {
    pub fn mse(&self) -> f64 {
        self.sum_sq.iter().sum::<f64>() / (self.pixels * self.sum_sq.len()) as f64
    }
}

/// Eval-mode errors of every sample in `data`, in order.
pub fn sample_errors(
    model: &ModelGraph<f32>,
    data: &WindowDataset<'_>,
    batch_size: usize,
) -> Result<Vec<SampleError>> {
    let mask = &data.series.mask;
    let v = data.series.n_vars();
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.forward(&x, Mode::Eval, 0)?;
        let per = mask.len() * v;
        for (p, t) in pred.data().chunks(per).zip(y.data().chunks(per)) {
            let mut e = SampleError {
                sum_sq: vec![0.0; v],
                sea_sum_sq: vec![0.0; v],
                pixels: mask.len(),
                sea_pixels: mask.iter().filter(|&&m| m == 1).count(),
            };
            for (i, (&a, &b)) in p.iter().zip(t).enumerate() {
                let d = (a as f64 - b as f64).powi(2);
                e.sum_sq[i % v] += d;
                if mask[i / v] == 1 {
                    e.sea_sum_sq[i % v] += d;
                }
            }
            out.push(e);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    /// A season name or `ALL`.
    pub season: String,
    pub horizon_h: f64,
    /// A variable name or `ALL`.
    pub variable: String,
    pub mse: f64,
    /// MSE restricted to sea pixels.
    pub sea_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn rows_for(model: &str, season: &str, horizon_h: f64, vars: &[String], errors: &[&SampleError]) -> Vec<EvalRow> {
    let n = errors.len() as f64;
    let pixels = errors[0].pixels as f64;
    let sea = errors[0].sea_pixels as f64;
    let per_var = |k: usize| {
        let s: f64 = errors.iter().map(|e| e.sum_sq[k]).sum();
        let ss: f64 = errors.iter().map(|e| e.sea_sum_sq[k]).sum();
        (s / (n * pixels), ss / (n * sea))
    };
    let row = |variable: &str, (mse, sea_mse): (f64, f64)| EvalRow {
        model: model.to_owned(),
        season: season.to_owned(),
        horizon_h,
        variable: variable.to_owned(),
        mse,
        sea_mse,
    };
    let mut rows: Vec<EvalRow> = vars.iter().enumerate().map(|(k, name)| row(name, per_var(k))).collect();
    let v = vars.len() as f64;
    let all = rows.iter().fold((0.0, 0.0), |acc, r| (acc.0 + r.mse / v, acc.1 + r.sea_mse / v));
    rows.push(row("ALL", all));
    rows
}

impl EvalReport {
    /// Per-season rows (each variable plus `ALL`) followed by rows pooling
    /// every season, weighted by sample count.
    pub fn from_errors(
        model: &str,
        horizon_h: f64,
        variables: &[String],
        seasons: &[(Season, Vec<SampleError>)],
    ) -> Result<Self> {
        if seasons.iter().any(|(_, e)| e.is_empty()) {
            return Err(Error::Data("cannot report on an empty split".into()));
        }
        let mut rows = Vec::new();
        for (season, errors) in seasons {
            let refs: Vec<&SampleError> = errors.iter().collect();
            rows.extend(rows_for(model, season.name(), horizon_h, variables, &refs));
        }
        let pooled: Vec<&SampleError> = seasons.iter().flat_map(|(_, e)| e.iter()).collect();
        if pooled.is_empty() {
            return Err(Error::Data("cannot report on an empty split".into()));
        }
        rows.extend(rows_for(model, "ALL", horizon_h, variables, &pooled));
        Ok(EvalReport { rows })
    }

    /// CSV `model,season,horizon_h,variable,mse`, plus `sea_mse` on request.
    pub fn to_csv(&self, sea_column: bool) -> String {
        let mut s = String::from("model,season,horizon_h,variable,mse");
        s.push_str(if sea_column { ",sea_mse\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{},{:e}", r.model, r.season, r.horizon_h, r.variable, r.mse);
            if sea_column {
                let _ = write!(s, ",{:e}", r.sea_mse);
            }
            s.push('\n');
        }
        s
    }

    pub fn merge(mut self, other: EvalReport) -> Self {
        self.rows.extend(other.rows);
        self
    }

    /// One line per model and horizon with the combined MSE of each season:
    /// `model,horizon_h,spring,summer,autumn,winter,ALL`.
    pub fn season_table(&self) -> String {
        let mut cells: BTreeMap<(String, u64), BTreeMap<String, f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.variable == "ALL") {
            cells
                .entry((r.model.clone(), r.horizon_h.to_bits()))
                .or_default()
                .insert(r.season.clone(), r.mse);
        }
        let mut s = String::from("model,horizon_h,spring,summer,autumn,winter,ALL\n");
        for ((model, h), by_season) in &cells {
            let _ = write!(s, "{model},{}", f64::from_bits(*h));
            for season in ["spring", "summer", "autumn", "winter", "ALL"] {
                match by_season.get(season) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.2e}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// `model,params,conv_layers,ratio_to_3ddr` for each architecture, with
/// `base` supplying everything but the architecture and width.
pub fn inspect_csv(base: &ModelConfig, architectures: &[Architecture]) -> Result<String> {
    let total = |arch: Architecture| -> Result<(usize, usize)> {
        let mut c = base.clone();
        c.architecture = arch;
        if base.architecture != arch {
            c.base_filters = None;
        }
        let r = ModelGraph::<f32>::build(c)?.count_params();
        Ok((r.total, r.conv_layers))
    };
    let reference = total(Architecture::Plain)?.0 as f64;
    let mut s = String::from("model,params,conv_layers,ratio_to_3ddr\n");
    for &a in architectures {
        let (p, c) = total(a)?;
        let _ = writeln!(s, "{},{p},{c},{:.4}", a.name(), p as f64 / reference);
    }
    Ok(s)
}

/// Min and max used to quantize a grayscale dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmRange {
    pub min: f64,
    pub max: f64,
    pub width: usize,
    pub height: usize,
}

impl PgmRange {
    pub fn dequantize(&self, q: u8) -> f64 {
        if self.max > self.min {
            self.min + q as f64 / 255.0 * (self.max - self.min)
        } else {
            self.min
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes an 8-bit binary PGM normalized to the image's own range, and a
/// JSON sidecar with that range next to it.
pub fn write_pgm(path: impl AsRef<Path>, values: &[f32], height: usize, width: usize) -> Result<PgmRange> {
    let path = path.as_ref();
    if values.len() != height * width {
        return Err(Error::Shape(format!("{} values for a {height}×{width} image", values.len())));
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let range = PgmRange {
        min,
        max,
        width,
        height,
    };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if max > min {
            ((v as f64 - min) / (max - min) * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    fs::write(sidecar(path), serde_json::to_vec_pretty(&range)?).map_err(|e| Error::io(sidecar(path), e))?;
    Ok(range)
}

/// Reads a dump written by [`write_pgm`] back into approximate values.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(PgmRange, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = fs::read(sidecar(path)).map_err(|e| Error::io(sidecar(path), e))?;
    let range: PgmRange = serde_json::from_slice(&side)?;
    let header = format!("P5\n{} {}\n255\n", range.width, range.height);
    let pixels = bytes
        .strip_prefix(header.as_bytes())
        .ok_or_else(|| Error::Format(format!("{} is not an 8-bit PGM of the recorded size", path.display())))?;
    if pixels.len() != range.width * range.height {
        return Err(Error::Format(format!("{} has {} pixels", path.display(), pixels.len())));
    }
    Ok((range, pixels.iter().map(|&q| range.dequantize(q)).collect()))
}

/// Physical-unit panels of one forecast: last input frame, truth,
/// prediction and absolute error, each `(H, W, V)`.
#[derive(Clone, Debug)]
pub struct ForecastPanels {
    pub input_last: Tensor<f32>,
    pub truth: Tensor<f32>,
    pub prediction: Tensor<f32>,
    pub abs_error: Tensor<f32>,
}

/// Runs the model on the window starting at `start` of a scaled series and
/// maps every panel back to physical units; land stays 0.
pub fn forecast_panels(
    model: &ModelGraph<f32>,
    scaled: &GridSeries,
    scaler: &ScalerParams,
    window: &WindowSpec,
    start: usize,
) -> Result<ForecastPanels> {
    let (x, y) = scaled.window(window, start)?;
    let (h, w, v) = (scaled.height(), scaled.width(), scaled.n_vars());
    let frame = |t: Tensor<f32>| -> Result<Tensor<f32>> {
        inverse_scale_tensor(&t.reshape(&[h, w, v])?, &scaled.mask, scaler)
    };
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let pred = model.forward(&x.reshape(&batch_shape)?, Mode::Eval, 0)?;
    let last = Tensor::new(&[h, w, v], scaled.frame(start + window.lags - 1).to_vec())?;
    let prediction = frame(pred)?;
    let truth = frame(y)?;
    let abs_error = prediction.zip_map(&truth, |a, b| (a - b).abs())?;
    Ok(ForecastPanels {
        input_last: frame(last)?,
        truth,
        prediction,
        abs_error,
    })
}

impl ForecastPanels {
    /// Writes `<variable>_<panel>.pgm` for every variable and panel; returns
    /// the written paths.
    pub fn write_images(&self, dir: impl AsRef<Path>, variables: &[String]) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let shape = self.truth.shape();
        let (h, w, v) = (shape[0], shape[1], shape[2]);
        let mut written = Vec::with_capacity(4 * v);
        for (k, name) in variables.iter().enumerate().take(v) {
            for (panel, t) in [
                ("input", &self.input_last),
                ("truth", &self.truth),
                ("prediction", &self.prediction),
                ("error", &self.abs_error),
            ] {
                let plane: Vec<f32> = t.data().iter().skip(k).step_by(v).copied().collect();
                let path = dir.join(format!("{name}_{panel}.pgm"));
                write_pgm(&path, &plane, h, w)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}
