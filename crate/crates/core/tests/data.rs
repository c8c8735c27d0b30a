mod support;

use chrono::{Duration, TimeZone, Utc};
use coastcast::data::{
    apply_scale, fit_scaler, inverse_scale, make_windows, read_container, split_by_dates, synth_generate,
    write_container, DateRange, GridSeries, ScalerParams, Season, SplitSpec, WindowDataset, WindowSpec,
};
use coastcast::training::Dataset;
use coastcast::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;
use support::rng;

fn tiny(values: Vec<f32>, shape: [usize; 4], mask: Vec<u8>) -> GridSeries {
    let start = Utc.with_ymd_and_hms(2017, 3, 1, 0, 0, 0).unwrap();
    let vars = (0..shape[3]).map(|i| format!("v{i}")).collect();
    GridSeries::new(Tensor::new(&shape, values).unwrap(), start, 3600, vars, mask).unwrap()
}

#[test]
fn container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.cten");
    let s = synth_generate(3, 12, 9, 10).unwrap();
    write_container(&s, &path).unwrap();
    let back = read_container(&path).unwrap();
    assert!(back.values.bitwise_eq(&s.values));
    assert_eq!(back, s);

    let one = tiny(vec![-0.0], [1, 1, 1, 1], vec![1]);
    write_container(&one, &path).unwrap();
    let back = read_container(&path).unwrap();
    assert!(back.values.bitwise_eq(&one.values));
}

#[test]
fn container_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.cten");
    write_container(&synth_generate(3, 4, 8, 8).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_container(&path).unwrap_err();
    assert!(matches!(&err, Error::Format(m) if m.contains("payload length")), "{err}");

    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(read_container(&path), Err(Error::Format(_))));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_container(&path), Err(Error::Format(m)) if m.contains("magic")));

    let mut bad = bytes.clone();
    bad[4] = 2;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_container(&path), Err(Error::Format(m)) if m.contains("version")));

    let mut huge = bytes.clone();
    huge[9..17].copy_from_slice(&u64::MAX.to_le_bytes());
    std::fs::write(&path, &huge).unwrap();
    assert!(matches!(read_container(&path), Err(Error::Format(_))));

    assert!(matches!(read_container(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn scaler_examples() {
    // Cell 1 is land and holds the extreme values, which must be ignored.
    let s = tiny(vec![0.0, 100.0, 2.0, -50.0], [2, 1, 2, 1], vec![1, 0]);
    let p = fit_scaler(&s, 0..2).unwrap();
    assert_eq!((p.min[0], p.max[0]), (0.0, 2.0));
    let scaled = apply_scale(&s, &p).unwrap();
    assert_eq!(scaled.values.data(), &[0.1, 0.0, 1.0, 0.0]);

    let mid = tiny(vec![0.0, 1.0, 2.0], [3, 1, 1, 1], vec![1]);
    let p = fit_scaler(&mid, 0..3).unwrap();
    assert!((apply_scale(&mid, &p).unwrap().values.data()[1] - 0.55).abs() < 1e-7);

    let flat = tiny(vec![1.0; 4], [4, 1, 1, 1], vec![1]);
    assert!(matches!(fit_scaler(&flat, 0..4), Err(Error::Data(_))));
    assert!(fit_scaler(&flat, 2..2).is_err());
}

#[test]
fn scaler_uses_training_range_only() {
    let s = tiny(vec![0.0, 1.0, 50.0], [3, 1, 1, 1], vec![1]);
    let p = fit_scaler(&s, 0..2).unwrap();
    assert_eq!(p.max[0], 1.0);
    // Later values are mapped linearly, beyond 1.
    let y = apply_scale(&s, &p).unwrap();
    assert!(y.values.data()[2] > 1.0);
}

#[test]
fn scaler_matches_brute_force_scan() {
    let mut r = rng(21);
    let (l, h, w, v) = (5, 4, 3, 2);
    let values: Vec<f32> = (0..l * h * w * v).map(|_| r.random_range(-5.0..5.0)).collect();
    let mask: Vec<u8> = (0..h * w).map(|i| u8::from(i % 4 != 0)).collect();
    let s = tiny(values.clone(), [l, h, w, v], mask.clone());
    let p = fit_scaler(&s, 1..4).unwrap();
    for k in 0..v {
        let sea: Vec<f64> = (1..4)
            .flat_map(|t| (0..h * w).map(move |c| (t, c)))
            .filter(|&(_, c)| mask[c] == 1)
            .map(|(t, c)| values[(t * h * w + c) * v + k] as f64)
            .collect();
        assert_eq!(p.min[k], sea.iter().cloned().fold(f64::INFINITY, f64::min));
        assert_eq!(p.max[k], sea.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn preprocessing_invariants_on_synthetic_data() {
    let raw = synth_generate(5, 300, 135, 135).unwrap();
    let s = raw.crop_spatial(128, 128).unwrap();
    assert_eq!(s.values.shape(), &[300, 128, 128, 4]);
    assert_eq!(s.values.at(&[7, 127, 127, 2]), raw.values.at(&[7, 127, 127, 2]));
    let p = fit_scaler(&s, 0..200).unwrap();
    let scaled = apply_scale(&s, &p).unwrap();
    let v = 4;
    for t in 0..300 {
        for (c, &m) in s.mask.iter().enumerate() {
            for k in 0..v {
                let y = scaled.frame(t)[c * v + k];
                if m == 0 {
                    assert_eq!(y.to_bits(), 0);
                } else if t < 200 {
                    assert!((0.1..=1.0).contains(&y), "{t} {c} {k} {y}");
                }
            }
        }
    }
    let back = inverse_scale(&scaled, &p).unwrap();
    assert!(back.values.max_abs_diff(&s.values).unwrap() < 1e-6);
}

#[test]
fn inverse_rejects_wrong_variable_count() {
    let s = tiny(vec![0.0, 1.0], [2, 1, 1, 1], vec![1]);
    let p = ScalerParams {
        min: vec![0.0, 0.0],
        max: vec![1.0, 1.0],
    };
    assert!(apply_scale(&s, &p).is_err());
    assert!(inverse_scale(&s, &p).is_err());
}

proptest! {
    #[test]
    fn window_count_law(l in 1usize..200, d in 1usize..20, h in 1usize..80) {
        let spec = WindowSpec::new(d, h).unwrap();
        let brute: Vec<usize> = (0..l).filter(|&i| i + d - 1 + h < l).collect();
        match make_windows(l, &spec) {
            Ok(w) => {
                prop_assert_eq!(w.len(), l - d - h + 1);
                prop_assert_eq!(w, brute);
            }
            Err(_) => prop_assert!(brute.is_empty()),
        }
    }
}

fn paper_span_series() -> GridSeries {
    // 2017-03-01 through 2019-02-14 on an 8×8 grid.
    let steps = (Utc.with_ymd_and_hms(2019, 2, 14, 0, 0, 0).unwrap()
        - Utc.with_ymd_and_hms(2017, 3, 1, 0, 0, 0).unwrap())
    .num_hours() as usize;
    synth_generate(9, steps, 8, 8).unwrap()
}

#[test]
fn seasonal_split_on_a_long_series() {
    let s = paper_span_series();
    let spec = SplitSpec::seasonal_2018();
    let w = WindowSpec::new(10, 12).unwrap();
    let idx = split_by_dates(&s, &spec, &w).unwrap();
    assert_eq!(idx.train_steps.len(), 8760);
    assert_eq!(idx.train.len(), 8760 - 22 + 1);
    for (season, starts) in idx.validation.iter().chain(&idx.test) {
        assert_eq!(starts.len(), 504 - 22 + 1, "{season}");
    }
    let seasons: Vec<Season> = idx.validation.iter().map(|(s, _)| *s).collect();
    assert_eq!(seasons, Season::ALL);

    let mut all: Vec<usize> = idx.train.clone();
    all.extend(idx.all_validation());
    all.extend(idx.all_test());
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n, "splits overlap");

    // Every window of every split stays inside its own range.
    for (r, starts) in spec.seasons.iter().zip(&idx.validation) {
        let range = r.validation.resolve(&s).unwrap();
        for &i in &starts.1 {
            assert!(range.contains(&i) && range.contains(&w.target_index(i)));
        }
    }
}

#[test]
fn split_outside_series_fails() {
    let s = synth_generate(1, 100, 8, 8).unwrap();
    let w = WindowSpec::new(2, 1).unwrap();
    assert!(split_by_dates(&s, &SplitSpec::seasonal_2018(), &w).is_err());
    let mut spec = SplitSpec::proportional(&s, 0.5).unwrap();
    spec.train = DateRange::hours_from(s.start_time - Duration::hours(500), 10);
    assert!(split_by_dates(&s, &spec, &w).is_err());
}

#[test]
fn proportional_split_layout() {
    let s = synth_generate(1, 2000, 8, 8).unwrap();
    let spec = SplitSpec::proportional(&s, 0.6).unwrap();
    spec.validate().unwrap();
    assert_eq!(spec.train.steps(3600), 1200);
    assert_eq!(spec.validation_steps(3600), 400);
    assert_eq!(spec.test_steps(3600), 400);
    let idx = split_by_dates(&s, &spec, &WindowSpec::new(10, 6).unwrap()).unwrap();
    assert_eq!(idx.all_test().len(), 4 * (100 - 16 + 1));
}

#[test]
fn synthetic_series_properties() {
    let a = synth_generate(7, 400, 16, 16).unwrap();
    let b = synth_generate(7, 400, 16, 16).unwrap();
    assert!(a.values.bitwise_eq(&b.values));
    assert!(!a.values.bitwise_eq(&synth_generate(8, 400, 16, 16).unwrap().values));
    assert_eq!(a.variables.len(), 4);
    assert!(a.mask.contains(&0) && a.mask.contains(&1));
    for t in 0..a.steps() {
        for (c, &m) in a.mask.iter().enumerate() {
            if m == 0 {
                assert!(a.frame(t)[c * 4..c * 4 + 4].iter().all(|&v| v == 0.0));
            }
        }
    }

    // Lag-1 autocorrelation of surface height, averaged over sea cells.
    let sea: Vec<usize> = (0..a.mask.len()).filter(|&c| a.mask[c] == 1).collect();
    let mut total = 0.0;
    for &c in &sea {
        let x: Vec<f64> = (0..a.steps()).map(|t| a.frame(t)[c * 4 + 3] as f64).collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let num: f64 = x.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum();
        let den: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        total += num / den;
    }
    let ac = total / sea.len() as f64;
    assert!(ac > 0.9, "{ac}");
}

#[test]
fn window_dataset_batches() {
    let s = synth_generate(2, 40, 8, 8).unwrap();
    let spec = WindowSpec::new(4, 3).unwrap();
    let ds = WindowDataset::new(&s, spec, vec![0, 5, 33]).unwrap();
    let (x, y) = ds.batch(&[2, 0]).unwrap();
    assert_eq!(x.shape(), &[2, 4, 8, 8, 4]);
    assert_eq!(y.shape(), &[2, 1, 8, 8, 4]);
    assert_eq!(y.index_axis0(0).unwrap().data(), s.frame(39));
    assert_eq!(x.index_axis0(1).unwrap().data()[..256], s.frame(0)[..]);
    assert!(ds.batch(&[3]).is_err());
    assert!(WindowDataset::new(&s, spec, vec![34]).is_err());
}
