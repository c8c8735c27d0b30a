//! JSON run configuration shared by the subcommands. Every key is
//! optional; see the README for the full list.

use std::path::Path;

use coastcast::blocks::DEFAULT_ASYMM_BRANCHES;
use coastcast::data::{GridSeries, SplitSpec, WindowSpec};
use coastcast::models::{Architecture, ModelConfig};
use coastcast::training::TrainConfig;
use coastcast::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_filters: Option<usize>,
    pub depth: usize,
    pub dropout: f64,
    pub asymm_branch_sizes: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            base_filters: None,
            depth: 4,
            dropout: 0.5,
            asymm_branch_sizes: DEFAULT_ASYMM_BRANCHES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitChoice {
    /// Training year from 2017-03-01 and four seasonal 504-hour windows.
    Seasonal2018,
    /// Leading fraction trains; the rest forms four seasonal blocks.
    Proportional { train_fraction: f64 },
    Explicit(SplitSpec),
}

impl Default for SplitChoice {
    fn default() -> Self {
        SplitChoice::Proportional { train_fraction: 0.6 }
    }
}

impl SplitChoice {
    pub fn resolve(&self, series: &GridSeries) -> Result<SplitSpec> {
        match self {
            SplitChoice::Seasonal2018 => Ok(SplitSpec::seasonal_2018()),
            SplitChoice::Proportional { train_fraction } => SplitSpec::proportional(series, *train_fraction),
            SplitChoice::Explicit(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            steps: 2000,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub lags: usize,
    /// Forecast horizon in steps.
    pub horizon: usize,
    pub split: SplitChoice,
    /// Keep only the first `[rows, cols]` of the grid.
    pub crop: Option<[usize; 2]>,
    pub synth: SynthSection,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            lags: 10,
            horizon: 12,
            split: SplitChoice::default(),
            crop: None,
            synth: SynthSection::default(),
            eval_batch_size: 16,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.lags, self.horizon)
    }

    /// Model configuration for a series of the given grid and variables.
    pub fn model_config(&self, architecture: Architecture, series: &GridSeries, seed: u64) -> ModelConfig {
        ModelConfig {
            architecture,
            base_filters: self.model.base_filters,
            depth: self.model.depth,
            lags: self.lags,
            height: series.height(),
            width: series.width(),
            variables: series.n_vars(),
            dropout: self.model.dropout,
            asymm_branch_sizes: self.model.asymm_branch_sizes.clone(),
            seed,
        }
    }

    pub fn prepare(&self, series: GridSeries) -> Result<GridSeries> {
        match self.crop {
            Some([h, w]) => series.crop_spatial(h, w),
            None => Ok(series),
        }
    }
}
