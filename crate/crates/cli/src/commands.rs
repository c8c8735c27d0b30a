use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use coastcast::data::{
    apply_scale, fit_scaler, read_container, split_by_dates, synth_generate, write_container, GridSeries,
    WindowDataset,
};
use coastcast::models::{Architecture, ModelConfig, ModelGraph};
use coastcast::report::{forecast_panels, inspect_csv, sample_errors, EvalReport};
use coastcast::training::{history_csv, train as train_model, Checkpoint, Dataset};
use coastcast::{Error, Result, Tensor};
use log::info;

use crate::config::RunConfig;

fn out_dir(out: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    Ok(out.clone())
}

fn required_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    out_dir(out)?.ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

pub fn synth(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    seed: u64,
    steps: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config.as_deref())?;
    let dir = required_out(out)?;
    let steps = steps.unwrap_or(cfg.synth.steps);
    let h = height.unwrap_or(cfg.synth.height);
    let w = width.unwrap_or(cfg.synth.width);
    let series = synth_generate(seed, steps, h, w)?;
    let path = dir.join("synth.cten");
    write_container(&series, &path)?;
    info!("{steps} steps of {h}x{w} from {}", series.start_time);
    println!("{}", path.display());
    Ok(())
}

pub fn train(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    data: &Path,
    model: &str,
    horizon: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config.as_deref())?;
    if let Some(h) = horizon {
        cfg.horizon = h;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let architecture: Architecture = model.parse()?;
    let dir = required_out(out)?;
    let window = cfg.window()?;
    let series = cfg.prepare(read_container(data)?)?;
    let mut graph = ModelGraph::<f32>::build(cfg.model_config(architecture, &series, cfg.train.seed))?;

    let split = cfg.split.resolve(&series)?;
    let idx = split_by_dates(&series, &split, &window)?;
    let scaler = fit_scaler(&series, idx.train_steps.clone())?;
    let scaled = apply_scale(&series, &scaler)?;
    let train_set = WindowDataset::new(&scaled, window, idx.train.clone())?;
    let val_set = WindowDataset::new(&scaled, window, idx.all_validation())?;
    info!(
        "{}: {} parameters, {} training and {} validation windows",
        architecture,
        graph.params.numel(),
        train_set.len(),
        val_set.len()
    );

    let outcome = train_model(&mut graph, &train_set, &val_set, &cfg.train, |r| {
        info!("epoch {:>4}  train {:.4e}  val {:.4e}", r.epoch, r.train_mse, r.val_mse);
    })?;
    let mut best = outcome.best;
    best.scaler = Some(scaler);
    best.window = Some(window);
    best.save(dir.join("best.ckpt"))?;
    write_text(&dir.join("history.csv"), &history_csv(&outcome.history))?;
    write_text(&dir.join("run_config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    info!("best validation MSE {:.4e} at epoch {}", best.val_loss, best.epoch);
    println!("{}", dir.join("best.ckpt").display());
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    model: ModelGraph<f32>,
    scaled: GridSeries,
}

fn load_for_inference(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let series = cfg.prepare(read_container(data)?)?;
    let mc = &ckpt.config;
    if (series.height(), series.width(), series.n_vars()) != (mc.height, mc.width, mc.variables) {
        return Err(Error::Data(format!(
            "data grid {}x{}x{} does not match the checkpoint's {}x{}x{}",
            series.height(),
            series.width(),
            series.n_vars(),
            mc.height,
            mc.width,
            mc.variables
        )));
    }
    let scaler = ckpt
        .scaler
        .as_ref()
        .ok_or_else(|| Error::Format("checkpoint carries no scaler".into()))?;
    let scaled = apply_scale(&series, scaler)?;
    Ok(Loaded { ckpt, model, scaled })
}

pub fn evaluate(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    checkpoint: &Path,
    data: &Path,
    sea_mse: bool,
    validation: bool,
) -> Result<()> {
    let cfg = RunConfig::load(config.as_deref())?;
    let dir = out_dir(out)?;
    let Loaded { ckpt, model, scaled } = load_for_inference(&cfg, checkpoint, data)?;
    let window = ckpt
        .window
        .ok_or_else(|| Error::Format("checkpoint carries no window spec".into()))?;
    let split = cfg.split.resolve(&scaled)?;
    let idx = split_by_dates(&scaled, &split, &window)?;
    let groups = if validation { &idx.validation } else { &idx.test };
    let mut seasons = Vec::with_capacity(groups.len());
    for (season, starts) in groups {
        let ds = WindowDataset::new(&scaled, window, starts.clone())?;
        seasons.push((*season, sample_errors(&model, &ds, cfg.eval_batch_size)?));
    }
    let horizon_h = (window.horizon as u64 * scaled.step_seconds) as f64 / 3600.0;
    let report = EvalReport::from_errors(model.architecture().name(), horizon_h, &scaled.variables, &seasons)?;
    let csv = report.to_csv(sea_mse);
    match dir {
        Some(dir) => {
            write_text(&dir.join("eval.csv"), &csv)?;
            println!("{}", report.season_table());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn predict(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    checkpoint: &Path,
    data: &Path,
    time: &str,
) -> Result<()> {
    let cfg = RunConfig::load(config.as_deref())?;
    let dir = required_out(out)?;
    let at: DateTime<Utc> = DateTime::parse_from_rfc3339(time)
        .map_err(|e| Error::Config(format!("--time `{time}`: {e}")))?
        .with_timezone(&Utc);
    let Loaded { ckpt, model, scaled } = load_for_inference(&cfg, checkpoint, data)?;
    let window = ckpt
        .window
        .ok_or_else(|| Error::Format("checkpoint carries no window spec".into()))?;
    let scaler = ckpt.scaler.as_ref().expect("checked on load");
    let last = scaled.index_of(at)?;
    let start = last
        .checked_sub(window.lags - 1)
        .ok_or_else(|| Error::Data(format!("{at} leaves fewer than {} input frames", window.lags)))?;
    if window.target_index(start) >= scaled.steps() {
        return Err(Error::Data(format!("target of {at} lies past the end of the series")));
    }
    let panels = forecast_panels(&model, &scaled, scaler, &window, start)?;
    panels.write_images(&dir, &scaled.variables)?;
    let target_time = scaled.time_of(window.target_index(start));
    let mut shape = vec![1];
    shape.extend_from_slice(panels.prediction.shape());
    let forecast = GridSeries::new(
        Tensor::new(&shape, panels.prediction.data().to_vec())?,
        target_time,
        scaled.step_seconds,
        scaled.variables.clone(),
        scaled.mask.clone(),
    )?;
    write_container(&forecast, dir.join("prediction.cten"))?;
    info!("forecast valid at {target_time}");
    println!("{}", target_time.to_rfc3339());
    Ok(())
}

pub fn inspect(config: &Option<PathBuf>, out: &Option<PathBuf>, model: &str) -> Result<()> {
    let cfg = RunConfig::load(config.as_deref())?;
    let dir = out_dir(out)?;
    let archs: Vec<Architecture> = if model == "all" {
        Architecture::ALL.to_vec()
    } else {
        vec![model.parse()?]
    };
    let single = archs.len() == 1;
    let base = ModelConfig {
        base_filters: if single { cfg.model.base_filters } else { None },
        depth: cfg.model.depth,
        lags: cfg.lags,
        dropout: cfg.model.dropout,
        asymm_branch_sizes: cfg.model.asymm_branch_sizes.clone(),
        ..ModelConfig::new(archs[0])
    };
    let csv = inspect_csv(&base, &archs)?;
    print!("{csv}");
    if let Some(dir) = dir {
        write_text(&dir.join("params.csv"), &csv)?;
        for arch in &archs {
            let mc = ModelConfig {
                architecture: *arch,
                base_filters: if single { base.base_filters } else { None },
                ..base.clone()
            };
            let graph = ModelGraph::<f32>::build(mc)?;
            write_text(&dir.join(format!("summary_{}.csv", arch.name())), &graph.summarize())?;
        }
    }
    Ok(())
}
