//! Lag/horizon windows and date-based train/validation/test splits.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::GridSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lags: usize,
    pub horizon: usize,
}

impl WindowSpec {
    pub fn new(lags: usize, horizon: usize) -> Result<Self> {
        if lags == 0 || horizon == 0 {
            return Err(Error::Config(format!("lags {lags} and horizon {horizon} must be ≥ 1")));
        }
        Ok(WindowSpec { lags, horizon })
    }

    /// Steps covered from the first input to the target, inclusive.
    pub fn span(&self) -> usize {
        self.lags + self.horizon
    }

    /// Window at `start` reads `start..start+lags` and predicts this step.
    pub fn target_index(&self, start: usize) -> usize {
        start + self.lags - 1 + self.horizon
    }

    /// Window starts whose inputs and target all lie in `range`.
    pub fn starts_within(&self, range: Range<usize>) -> Range<usize> {
        let end = (range.end + 1).saturating_sub(self.span()).max(range.start);
        range.start..end
    }
}

/// All window starts of a series with `steps` steps: `steps − d − h + 1` of them.
pub fn make_windows(steps: usize, spec: &WindowSpec) -> Result<Vec<usize>> {
    if steps < spec.span() {
        return Err(Error::Data(format!(
            "series of {steps} steps too short for {} lags and horizon {}",
            spec.lags, spec.horizon
        )));
    }
    Ok(spec.starts_within(0..steps).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Spring,
    Summer,
    Autumn,
    Winter,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Spring, Season::Summer, Season::Autumn, Season::Winter];

    pub fn name(self) -> &'static str {
        match self {
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
            Season::Winter => "winter",
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Season::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown season `{s}`")))
    }
}

/// Half-open UTC interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

fn midnight(y: i32, m: u32, d: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).single().expect("valid calendar date")
}

impl DateRange {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if end <= start {
            return Err(Error::Config(format!(
                "empty date range {} .. {}",
                start.to_rfc3339(),
                end.to_rfc3339()
            )));
        }
        Ok(DateRange { start, end })
    }

    /// From midnight of the first date to midnight of the second.
    pub fn days(from: (i32, u32, u32), to: (i32, u32, u32)) -> Self {
        DateRange {
            start: midnight(from.0, from.1, from.2),
            end: midnight(to.0, to.1, to.2),
        }
    }

    pub fn hours_from(start: DateTime<Utc>, hours: i64) -> Self {
        DateRange {
            start,
            end: start + Duration::hours(hours),
        }
    }

    pub fn steps(&self, step_seconds: u64) -> usize {
        ((self.end - self.start).num_seconds() / step_seconds as i64) as usize
    }

    fn overlaps(&self, other: &DateRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Step indices of the range within `series`.
    pub fn resolve(&self, series: &GridSeries) -> Result<Range<usize>> {
        Ok(series.index_of(self.start)?..series.index_of(self.end)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonRange {
    pub season: Season,
    pub validation: DateRange,
    pub test: DateRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateRange,
    pub seasons: Vec<SeasonRange>,
}

/// Hours per season in each of the validation and test sets.
pub const SEASON_HOURS: i64 = 504;

impl SplitSpec {
    /// One year of training from 2017-03-01 followed by four 21-day
    /// validation and test windows, one pair per season.
    ///
    /// Validation windows run from their first date to their (exclusive)
    /// last date. Each test window is the 504 hours from its first date.
    pub fn seasonal_2018() -> Self {
        let season = |season, val_from, val_to, test_from: (i32, u32, u32)| SeasonRange {
            season,
            validation: DateRange::days(val_from, val_to),
            test: DateRange::hours_from(midnight(test_from.0, test_from.1, test_from.2), SEASON_HOURS),
        };
        SplitSpec {
            train: DateRange::days((2017, 3, 1), (2018, 3, 1)),
            seasons: vec![
                season(Season::Spring, (2018, 4, 1), (2018, 4, 22), (2018, 4, 23)),
                season(Season::Summer, (2018, 7, 1), (2018, 7, 22), (2018, 7, 23)),
                season(Season::Autumn, (2018, 10, 1), (2018, 10, 22), (2018, 10, 23)),
                season(Season::Winter, (2019, 1, 1), (2019, 1, 22), (2019, 1, 23)),
            ],
        }
    }

    /// Desk-scale layout for a series of `steps` steps: the first
    /// `train_fraction` trains, the rest is cut into four equal seasonal
    /// blocks, each half validation and half test.
    pub fn proportional(series: &GridSeries, train_fraction: f64) -> Result<Self> {
        if !(0.0 < train_fraction && train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside (0,1)")));
        }
        let steps = series.steps();
        let train_end = (steps as f64 * train_fraction).round() as usize;
        let block = (steps - train_end) / 8;
        if train_end == 0 || block == 0 {
            return Err(Error::Data(format!("series of {steps} steps too short to split")));
        }
        let t = |i: usize| series.time_of(i);
        let seasons = Season::ALL
            .iter()
            .enumerate()
            .map(|(k, &season)| {
                let v0 = train_end + 2 * k * block;
                SeasonRange {
                    season,
                    validation: DateRange { start: t(v0), end: t(v0 + block) },
                    test: DateRange { start: t(v0 + block), end: t(v0 + 2 * block) },
                }
            })
            .collect();
        Ok(SplitSpec {
            train: DateRange { start: t(0), end: t(train_end) },
            seasons,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.train];
        for s in &self.seasons {
            all.push(s.validation);
            all.push(s.test);
        }
        for r in &all {
            DateRange::new(r.start, r.end)?;
        }
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].iter().any(|b| a.overlaps(b)) {
                return Err(Error::Config("split ranges overlap".into()));
            }
        }
        Ok(())
    }

    pub fn validation_steps(&self, step_seconds: u64) -> usize {
        self.seasons.iter().map(|s| s.validation.steps(step_seconds)).sum()
    }

    pub fn test_steps(&self, step_seconds: u64) -> usize {
        self.seasons.iter().map(|s| s.test.steps(step_seconds)).sum()
    }
}

/// Window starts per split; windows never straddle a range boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<(Season, Vec<usize>)>,
    pub test: Vec<(Season, Vec<usize>)>,
    /// Step range of the training period, for fitting the scaler.
    pub train_steps: Range<usize>,
}

impl SplitIndices {
    pub fn all_validation(&self) -> Vec<usize> {
        self.validation.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn all_test(&self) -> Vec<usize> {
        self.test.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }
}

pub fn split_by_dates(series: &GridSeries, spec: &SplitSpec, window: &WindowSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let starts = |r: &DateRange| -> Result<Vec<usize>> { Ok(window.starts_within(r.resolve(series)?).collect()) };
    let train_steps = spec.train.resolve(series)?;
    Ok(SplitIndices {
        train: window.starts_within(train_steps.clone()).collect(),
        validation: spec
            .seasons
            .iter()
            .map(|s| Ok((s.season, starts(&s.validation)?)))
            .collect::<Result<_>>()?,
        test: spec
            .seasons
            .iter()
            .map(|s| Ok((s.season, starts(&s.test)?)))
            .collect::<Result<_>>()?,
        train_steps,
    })
}
