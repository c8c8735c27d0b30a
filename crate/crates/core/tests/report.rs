mod support;

use coastcast::data::{apply_scale, fit_scaler, synth_generate, Season, WindowDataset, WindowSpec};
use coastcast::models::{Architecture, ModelConfig, ModelGraph};
use coastcast::nn::Mode;
use coastcast::report::{
    forecast_panels, inspect_csv, read_pgm, sample_errors, write_pgm, EvalReport, SampleError,
};
use coastcast::training::Dataset;
use coastcast::Error;
use proptest::prelude::*;
use rand::Rng;
use support::rng;

fn vars(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

fn random_errors(n: usize, v: usize, seed: u64) -> Vec<SampleError> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let sea_sum_sq: Vec<f64> = (0..v).map(|_| r.random_range(0.0..5.0)).collect();
            SampleError {
                sum_sq: sea_sum_sq.iter().map(|s| s + r.random_range(0.0..1.0)).collect(),
                sea_sum_sq,
                pixels: 64,
                sea_pixels: 40,
            }
        })
        .collect()
}

fn row<'a>(rep: &'a EvalReport, season: &str, variable: &str) -> &'a coastcast::report::EvalRow {
    rep.rows
        .iter()
        .find(|r| r.season == season && r.variable == variable)
        .unwrap()
}

#[test]
fn pooled_mse_is_sample_weighted_mean_of_seasons() {
    let sizes = [3, 7, 1, 12];
    let seasons: Vec<(Season, Vec<SampleError>)> = Season::ALL
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&s, n))| (s, random_errors(n, 3, i as u64)))
        .collect();
    let rep = EvalReport::from_errors("m", 6.0, &vars(3), &seasons).unwrap();
    assert_eq!(rep.rows.len(), 5 * 4);
    let total: usize = sizes.iter().sum();
    for variable in ["v0", "v1", "v2", "ALL"] {
        let weighted: f64 = Season::ALL
            .iter()
            .zip(sizes)
            .map(|(s, n)| row(&rep, s.name(), variable).mse * n as f64)
            .sum::<f64>()
            / total as f64;
        assert!((row(&rep, "ALL", variable).mse - weighted).abs() < 1e-9);
    }
    let spring = row(&rep, "spring", "ALL");
    let mean: f64 = (0..3).map(|k| row(&rep, "spring", &format!("v{k}")).mse).sum::<f64>() / 3.0;
    assert!((spring.mse - mean).abs() < 1e-12);
    let brute: f64 = seasons[0].1.iter().map(|e| e.sea_sum_sq[1]).sum::<f64>() / (3.0 * 40.0);
    assert!((row(&rep, "spring", "v1").sea_mse - brute).abs() < 1e-12);
}

#[test]
fn empty_season_is_an_error() {
    let seasons = vec![(Season::Spring, random_errors(2, 1, 0)), (Season::Summer, vec![])];
    assert!(matches!(
        EvalReport::from_errors("m", 1.0, &vars(1), &seasons),
        Err(Error::Data(_))
    ));
}

#[test]
fn csv_and_season_table_layout() {
    let seasons: Vec<_> = Season::ALL.iter().map(|&s| (s, random_errors(2, 2, 4))).collect();
    let rep = EvalReport::from_errors("res-3ddr-unet", 3.0, &vars(2), &seasons).unwrap();
    let csv = rep.to_csv(true);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,season,horizon_h,variable,mse,sea_mse"));
    assert_eq!(lines.count(), 15);
    assert!(rep.to_csv(false).lines().all(|l| l.split(',').count() == 5));
    let other = EvalReport::from_errors("3ddr-unet", 3.0, &vars(2), &seasons).unwrap();
    let table = rep.merge(other).season_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "model,horizon_h,spring,summer,autumn,winter,ALL");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("3ddr-unet,3,"));
    assert_eq!(lines[2].split(',').count(), 7);
}

#[test]
fn sample_errors_match_brute_force() {
    let series = synth_generate(2, 40, 8, 8).unwrap();
    let scaled = apply_scale(&series, &fit_scaler(&series, 0..40).unwrap()).unwrap();
    let spec = WindowSpec::new(4, 2).unwrap();
    let ds = WindowDataset::new(&scaled, spec, vec![0, 5, 9, 20, 30]).unwrap();
    let mut c = ModelConfig::new(Architecture::Residual).with_filters(2).with_grid(8, 8);
    c.depth = 2;
    c.lags = 4;
    let m = ModelGraph::<f32>::build(c).unwrap();
    let errs = sample_errors(&m, &ds, 2).unwrap();
    assert_eq!(errs.len(), 5);
    let sea = series.mask.iter().filter(|&&s| s == 1).count();
    for (i, e) in errs.iter().enumerate() {
        let (x, y) = ds.batch(&[i]).unwrap();
        let p = m.forward(&x, Mode::Eval, 0).unwrap();
        let mut full = [0.0f64; 4];
        let mut on_sea = [0.0f64; 4];
        for (j, (&a, &b)) in p.data().iter().zip(y.data()).enumerate() {
            let d = (a as f64 - b as f64).powi(2);
            full[j % 4] += d;
            if series.mask[j / 4] == 1 {
                on_sea[j % 4] += d;
            }
        }
        assert_eq!(e.pixels, 64);
        assert_eq!(e.sea_pixels, sea);
        for k in 0..4 {
            assert!((e.sum_sq[k] - full[k]).abs() <= 1e-9 * full[k].max(1.0));
            assert!((e.sea_sum_sq[k] - on_sea[k]).abs() <= 1e-9 * on_sea[k].max(1.0));
        }
    }
}

#[test]
fn forecast_images_cover_every_panel() {
    let series = synth_generate(3, 30, 8, 8).unwrap();
    let scaler = fit_scaler(&series, 0..30).unwrap();
    let scaled = apply_scale(&series, &scaler).unwrap();
    let spec = WindowSpec::new(4, 3).unwrap();
    let mut c = ModelConfig::new(Architecture::Plain).with_filters(2).with_grid(8, 8);
    c.depth = 2;
    c.lags = 4;
    let m = ModelGraph::<f32>::build(c).unwrap();
    let panels = forecast_panels(&m, &scaled, &scaler, &spec, 5).unwrap();
    let truth = series.frame(5 + 3 + 3);
    for (a, b) in panels.truth.data().iter().zip(truth) {
        assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
    }
    for (i, &e) in panels.abs_error.data().iter().enumerate() {
        let d = (panels.prediction.data()[i] - panels.truth.data()[i]).abs();
        assert_eq!(e, d);
        if series.mask[i / 4] == 0 {
            assert_eq!(panels.prediction.data()[i], 0.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let written = panels.write_images(dir.path(), &series.variables).unwrap();
    assert_eq!(written.len(), 16);
    assert!(written.iter().all(|p| p.exists() && p.with_extension("json").exists()));
}

#[test]
fn inspect_is_stable_and_ranks_residual_above_plain() {
    let base = ModelConfig::new(Architecture::Plain);
    let a = inspect_csv(&base, &Architecture::ALL).unwrap();
    assert_eq!(a, inspect_csv(&base, &Architecture::ALL).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "model,params,conv_layers,ratio_to_3ddr");
    let res: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(res[0], "res-3ddr-unet");
    let ratio: f64 = res[3].parse().unwrap();
    assert!((1.4..=1.6).contains(&ratio), "{ratio}");
    assert_eq!(lines[1].split(',').nth(3), Some("1.0000"));
}

#[test]
fn pgm_rejects_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.pgm");
    write_pgm(&p, &[0.0, 1.0, 2.0, 3.0], 2, 2).unwrap();
    std::fs::write(&p, b"P2\n2 2\n255\n0 1 2 3").unwrap();
    assert!(matches!(read_pgm(&p), Err(Error::Format(_))));
    assert!(matches!(write_pgm(&p, &[0.0; 3], 2, 2), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pgm_round_trip_within_one_level(
        h in 1usize..9,
        w in 1usize..9,
        seed in 0u64..10_000,
        scale in 0.01f32..100.0,
    ) {
        let mut r = rng(seed);
        let values: Vec<f32> = (0..h * w).map(|_| r.random_range(-1.0f32..1.0) * scale).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        let range = write_pgm(&p, &values, h, w).unwrap();
        let (back_range, back) = read_pgm(&p).unwrap();
        prop_assert_eq!(range, back_range);
        let step = (range.max - range.min) / 255.0;
        for (a, b) in values.iter().zip(&back) {
            prop_assert!((*a as f64 - b).abs() <= 0.5 * step + 1e-9 * range.max.abs().max(1.0));
        }
    }
}
