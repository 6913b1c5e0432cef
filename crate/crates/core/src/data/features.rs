//! Per-date gridded feature cubes and the lag / precipitation-delta
//! feature builders.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `D×H×W×F` values with one date per leading index.
///
/// `valid[d]` is false for warm-up days whose lagged values reach before the
/// start of their season block; those days hold NaN in the lagged channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCube {
    pub dates: Vec<NaiveDate>,
    pub height: usize,
    pub width: usize,
    pub features: Vec<String>,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FeatureCube {
    pub fn new(
        dates: Vec<NaiveDate>,
        height: usize,
        width: usize,
        features: Vec<String>,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = dates.len() * height * width * features.len();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "cube of {} dates × {height}×{width} × {} features needs {expected} values, got {}",
                dates.len(),
                features.len(),
                data.len()
            )));
        }
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("cube dates must be strictly increasing"));
        }
        let valid = vec![true; dates.len()];
        Ok(Self {
            dates,
            height,
            width,
            features,
            data,
            valid,
        })
    }

    pub fn num_days(&self) -> usize {
        self.dates.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn day_len(&self) -> usize {
        self.cells() * self.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    #[inline]
    pub fn index(&self, day: usize, row: usize, col: usize, feature: usize) -> usize {
        ((day * self.height + row) * self.width + col) * self.features.len() + feature
    }

    pub fn get(&self, day: usize, row: usize, col: usize, feature: usize) -> f64 {
        self.data[self.index(day, row, col, feature)]
    }

    pub fn day(&self, day: usize) -> &[f64] {
        let n = self.day_len();
        &self.data[day * n..(day + 1) * n]
    }

    /// Values of one channel on one day, row-major over the grid.
    pub fn channel(&self, day: usize, feature: usize) -> Vec<f64> {
        let f = self.features.len();
        self.day(day).iter().skip(feature).step_by(f).copied().collect()
    }

    /// True when `b` is the calendar day after `a`.
    pub fn consecutive(&self, a: usize, b: usize) -> bool {
        self.dates[a].succ_opt() == Some(self.dates[b])
    }

    /// Index of the first day of the contiguous run containing each day.
    pub fn block_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.dates.len());
        for d in 0..self.dates.len() {
            if d > 0 && self.consecutive(d - 1, d) {
                starts.push(starts[d - 1]);
            } else {
                starts.push(d);
            }
        }
        starts
    }

    /// Copy with the listed channels appended, `extra[d]` holding
    /// `H×W×extra_names.len()` values per day.
    fn widen(&self, extra_names: Vec<String>, extra: Vec<f64>, extra_valid: Vec<bool>) -> Result<Self> {
        let (f0, f1) = (self.features.len(), extra_names.len());
        for name in &extra_names {
            if self.features.contains(name) {
                return Err(Error::invalid(format!("feature `{name}` already present")));
            }
        }
        let rows = self.num_days() * self.cells();
        let mut data = Vec::with_capacity(rows * (f0 + f1));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * f0..(r + 1) * f0]);
            data.extend_from_slice(&extra[r * f1..(r + 1) * f1]);
        }
        let mut features = self.features.clone();
        features.extend(extra_names);
        let valid = self
            .valid
            .iter()
            .zip(extra_valid)
            .map(|(a, b)| *a && b)
            .collect();
        Ok(Self {
            dates: self.dates.clone(),
            height: self.height,
            width: self.width,
            features,
            data,
            valid,
        })
    }

    /// Keeps only valid days.
    pub fn drop_invalid(&self) -> Self {
        let n = self.day_len();
        let keep: Vec<usize> = (0..self.num_days()).filter(|&d| self.valid[d]).collect();
        let mut data = Vec::with_capacity(keep.len() * n);
        for &d in &keep {
            data.extend_from_slice(self.day(d));
        }
        Self {
            dates: keep.iter().map(|&d| self.dates[d]).collect(),
            height: self.height,
            width: self.width,
            features: self.features.clone(),
            data,
            valid: vec![true; keep.len()],
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

pub fn lag_name(variable: &str, lag: usize) -> String {
    format!("{variable}_lag{lag}")
}

pub fn delta_name(variable: &str, lag: usize) -> String {
    format!("{variable}_delta{lag}")
}

/// Appends, for every lag and every current channel, the channel shifted by
/// `lag` days within each grid cell's series. Channels are ordered by lag
/// then by source channel. Days whose shifted source falls outside their
/// season block become invalid.
pub fn build_lag_features(cube: &FeatureCube, lags: &[usize]) -> Result<FeatureCube> {
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if lags.contains(&0) {
        return Err(Error::invalid("lags must be positive"));
    }
    if cube.num_days() < max_lag + 1 {
        return Err(Error::InsufficientData(format!(
            "lag {max_lag} needs at least {} days, cube has {}",
            max_lag + 1,
            cube.num_days()
        )));
    }
    let f = cube.num_features();
    let starts = cube.block_starts();
    let names: Vec<String> = lags
        .iter()
        .flat_map(|&l| cube.features.iter().map(move |v| lag_name(v, l)))
        .collect();
    let width = names.len();
    let mut extra = vec![f64::NAN; cube.num_days() * cube.cells() * width];
    let mut valid = vec![true; cube.num_days()];
    for d in 0..cube.num_days() {
        for (li, &lag) in lags.iter().enumerate() {
            if d < starts[d] + lag {
                valid[d] = false;
                continue;
            }
            let src = cube.day(d - lag);
            for cell in 0..cube.cells() {
                let dst = (d * cube.cells() + cell) * width + li * f;
                extra[dst..dst + f].copy_from_slice(&src[cell * f..(cell + 1) * f]);
            }
        }
    }
    cube.widen(names, extra, valid)
}

/// Appends `ΔP_lag = P_{t−lag} − P_{t−lag+1}` for every lag whose
/// precipitation lag channels exist (`P_{t−0}` is the base channel).
pub fn build_precip_deltas(cube: &FeatureCube, precip: &str, lags: &[usize]) -> Result<FeatureCube> {
    let base = cube
        .feature_index(precip)
        .ok_or_else(|| Error::invalid(format!("precipitation channel `{precip}` missing")))?;
    let lag_channel = |l: usize| -> Result<usize> {
        if l == 0 {
            return Ok(base);
        }
        cube.feature_index(&lag_name(precip, l)).ok_or_else(|| {
            Error::invalid(format!(
                "precipitation lag channel `{}` missing; build lags first",
                lag_name(precip, l)
            ))
        })
    };
    let pairs: Vec<(usize, usize)> = lags
        .iter()
        .map(|&l| Ok((lag_channel(l)?, lag_channel(l - 1)?)))
        .collect::<Result<_>>()?;
    let names: Vec<String> = lags.iter().map(|&l| delta_name(precip, l)).collect();
    let f = cube.num_features();
    let mut extra = Vec::with_capacity(cube.num_days() * cube.cells() * pairs.len());
    for px in cube.data.chunks_exact(f) {
        for &(older, newer) in &pairs {
            extra.push(px[older] - px[newer]);
        }
    }
    let valid = vec![true; cube.num_days()];
    cube.widen(names, extra, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> FeatureCube {
        let start = NaiveDate::from_ymd_opt(2000, 6, 1).unwrap();
        let dates = start.iter_days().take(values.len()).collect();
        FeatureCube::new(dates, 1, 1, vec!["tp".into()], values.to_vec()).unwrap()
    }

    #[test]
    fn lag_one_shifts_series() {
        let lagged = build_lag_features(&series(&[1., 2., 3., 4.]), &[1]).unwrap();
        assert_eq!(lagged.features, ["tp", "tp_lag1"]);
        assert!(lagged.get(0, 0, 0, 1).is_nan());
        assert_eq!(lagged.valid, [false, true, true, true]);
        let ch: Vec<f64> = (1..4).map(|d| lagged.get(d, 0, 0, 1)).collect();
        assert_eq!(ch, [1., 2., 3.]);
    }

    #[test]
    fn lag_three_leaves_one_valid_day() {
        let lagged = build_lag_features(&series(&[1., 2., 3., 4.]), &[3]).unwrap();
        assert_eq!(lagged.drop_invalid().num_days(), 1);
        assert!(build_lag_features(&series(&[1., 2., 3.]), &[3]).is_err());
    }

    #[test]
    fn delta_formula() {
        let lagged = build_lag_features(&series(&[0., 2., 5.]), &[1, 2]).unwrap();
        let d = build_precip_deltas(&lagged, "tp", &[1, 2]).unwrap();
        let i1 = d.feature_index("tp_delta1").unwrap();
        // ΔP₁ at t=2 is P₁ − P₂
        assert_eq!(d.get(2, 0, 0, i1), -3.0);
        let i2 = d.feature_index("tp_delta2").unwrap();
        assert_eq!(d.get(2, 0, 0, i2), -2.0);
    }

    #[test]
    fn constant_precip_has_zero_deltas() {
        let lagged = build_lag_features(&series(&[4.; 6]), &[1, 2, 3]).unwrap();
        let d = build_precip_deltas(&lagged, "tp", &[1, 2, 3]).unwrap().drop_invalid();
        for name in ["tp_delta1", "tp_delta2", "tp_delta3"] {
            let i = d.feature_index(name).unwrap();
            assert!((0..d.num_days()).all(|t| d.get(t, 0, 0, i) == 0.0));
        }
    }

    #[test]
    fn deltas_need_precip() {
        let c = series(&[1., 2.]);
        assert!(build_precip_deltas(&c, "rain", &[1]).is_err());
        assert!(build_precip_deltas(&c, "tp", &[1]).is_err());
    }

    #[test]
    fn lags_do_not_cross_season_gaps() {
        let d = |m, day| NaiveDate::from_ymd_opt(2000, m, day).unwrap();
        let dates = vec![d(9, 29), d(9, 30), d(6, 1).with_year_plus(), d(6, 2).with_year_plus()];
        let c = FeatureCube::new(dates, 1, 1, vec!["tp".into()], vec![1., 2., 3., 4.]).unwrap();
        let lagged = build_lag_features(&c, &[1]).unwrap();
        assert_eq!(lagged.valid, [false, true, false, true]);
        assert_eq!(lagged.get(3, 0, 0, 1), 3.0);
    }

    trait NextYear {
        fn with_year_plus(self) -> Self;
    }
    impl NextYear for NaiveDate {
        fn with_year_plus(self) -> Self {
            use chrono::Datelike;
            self.with_year(self.year() + 1).unwrap()
        }
    }
}
