//! Seeded synthetic coastal fields.
//!
//! Currents are a tidally pulsing gyre plus mean-reverting drift, salinity
//! is an anomaly pattern displaced by a slow random excursion, and surface
//! height mixes a semidiurnal and a diurnal tide with a persistent surge.
//! The stochastic forcings make longer horizons genuinely harder to
//! predict.

use std::f64::consts::PI;

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::GridSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTH_VARIABLES: [&str; 4] = ["east_current", "north_current", "salinity", "sea_surface_height"];

const M2_HOURS: f64 = 12.42;
const K1_HOURS: f64 = 23.93;

/// Stationary AR(1) process with the given lag-1 coefficient and std.
struct Ar1 {
    rho: f64,
    innovation: f64,
    value: f64,
}

impl Ar1 {
    fn new(rho: f64, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let start: f64 = rng.sample(StandardNormal);
        Ar1 {
            rho,
            innovation: std * (1.0 - rho * rho).sqrt(),
            value: std * start,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let v = self.value;
        let e: f64 = rng.sample(StandardNormal);
        self.value = self.rho * self.value + self.innovation * e;
        v
    }
}

/// Land occupies the top-right block: the first quarter of the rows and
/// the last three eighths of the columns.
pub fn synth_mask(height: usize, width: usize) -> Vec<u8> {
    let land_rows = height / 4;
    let land_col = width - width * 3 / 8;
    (0..height * width)
        .map(|i| u8::from(!(i / width < land_rows && i % width >= land_col)))
        .collect()
}

pub fn synth_generate(seed: u64, steps: usize, height: usize, width: usize) -> Result<GridSeries> {
    if steps < 1 || height < 8 || width < 8 {
        return Err(Error::Config(format!(
            "synthetic extents must be at least 8×8 with one step, got {steps}×{height}×{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let mut drift_u = Ar1::new(0.9, 0.3, &mut rng);
    let mut drift_v = Ar1::new(0.9, 0.3, &mut rng);
    let mut gyre = Ar1::new(0.95, 0.4, &mut rng);
    let mut excursion = Ar1::new(0.98, 0.15, &mut rng);
    let mut surge = Ar1::new(0.995, 0.5, &mut rng);

    let (wm2, wk1) = (2.0 * PI / M2_HOURS, 2.0 * PI / K1_HOURS);
    let mask = synth_mask(height, width);
    let mut data = Vec::with_capacity(steps * height * width * 4);
    for step in 0..steps {
        let t = step as f64;
        let (du, dv) = (drift_u.step(&mut rng), drift_v.step(&mut rng));
        let g = 1.0 + 0.3 * (wm2 * t + phase[0]).cos() + gyre.step(&mut rng);
        let ex = 0.1 * (wk1 * t + phase[1]).sin() + excursion.step(&mut rng);
        let ey = 0.1 * (wk1 * t + phase[2]).cos() - 0.5 * ex;
        let s = surge.step(&mut rng);
        let tide_u = 0.4 * (wm2 * t + phase[3]).cos();
        let tide_v = 0.2 * (wm2 * t + phase[3]).sin();
        for row in 0..height {
            let y = (row as f64 + 0.5) / height as f64;
            for col in 0..width {
                if mask[row * width + col] == 0 {
                    data.extend_from_slice(&[0.0; 4]);
                    continue;
                }
                let x = (col as f64 + 0.5) / width as f64;
                let u = -g * (PI * x).sin() * (PI * y).cos() + tide_u + du;
                let v = g * (PI * x).cos() * (PI * y).sin() + tide_v + dv;
                let (ax, ay) = (x - ex, y - ey);
                let sal = 1.2 * (2.0 * PI * ax + phase[4]).sin() * (2.0 * PI * ay).cos()
                    + 0.4 * (4.0 * PI * (ax + ay) + phase[5]).sin()
                    - 0.8 * (x - 0.5);
                let ssh = 0.3 * (wm2 * t - PI * x + phase[0]).cos()
                    + 0.6 * (wk1 * t - 0.5 * PI * y + phase[1]).cos()
                    + s * (1.0 + 0.3 * y);
                data.extend_from_slice(&[u as f32, v as f32, sal as f32, ssh as f32]);
            }
        }
    }
    let values = Tensor::new(&[steps, height, width, 4], data)?;
    let start = Utc.with_ymd_and_hms(2017, 3, 1, 0, 0, 0).single().expect("valid date");
    GridSeries::new(
        values,
        start,
        3600,
        SYNTH_VARIABLES.iter().map(|s| s.to_string()).collect(),
        mask,
    )
}
