use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::features::FeatureCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SEQ_LEN: usize = 7;

/// One training instance: `T×H×W×F` predictors and the next day's
/// area-mean precipitation in `log1p` space.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub x: Tensor,
    pub y: f64,
    pub target_date: NaiveDate,
}

impl SequenceSample {
    pub fn seq_len(&self) -> usize {
        self.x.shape()[0]
    }

    /// Calendar date of input step `s` (step `T−1` is the day before the
    /// target).
    pub fn step_date(&self, s: usize) -> NaiveDate {
        self.target_date - chrono::Duration::days((self.seq_len() - s) as i64)
    }

    pub fn target_mm(&self) -> f64 {
        expm1_inverse(self.y).0
    }
}

/// `log(1 + y)` for a non-negative rainfall amount.
pub fn log1p_target(y_mm: f64) -> Result<f64> {
    if !(y_mm >= 0.0) {
        return Err(Error::invalid(format!(
            "rainfall must be non-negative, got {y_mm} mm/day"
        )));
    }
    Ok(y_mm.ln_1p())
}

/// Inverse of [`log1p_target`]. Negative results are clamped to 0 mm/day;
/// the flag reports whether the clamp fired.
pub fn expm1_inverse(y_log: f64) -> (f64, bool) {
    let mm = y_log.exp_m1();
    if mm < 0.0 {
        (0.0, true)
    } else {
        (mm, false)
    }
}

/// Where each sample's window sits in the cube it was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndex {
    /// Cube day index of the last input step.
    pub anchor: usize,
    pub target_date: NaiveDate,
}

#[derive(Clone, Debug, Default)]
pub struct Assembly {
    pub samples: Vec<SequenceSample>,
    pub index: Vec<SampleIndex>,
    pub warnings: Vec<String>,
}

/// Admissible anchors: day `t` qualifies when days `t−T+1 … t+1` are valid
/// and consecutive.
pub fn admissible_anchors(cube: &FeatureCube, seq_len: usize) -> Vec<usize> {
    let d = cube.num_days();
    if seq_len == 0 || d < seq_len + 1 {
        return Vec::new();
    }
    (seq_len - 1..d - 1)
        .filter(|&t| {
            (t + 1 - seq_len..=t + 1).all(|i| cube.valid[i])
                && (t + 1 - seq_len..=t).all(|i| cube.consecutive(i, i + 1))
        })
        .collect()
}

/// Area-mean of `precip` on `day`, in mm/day.
pub fn area_mean(cube: &FeatureCube, day: usize, precip: usize) -> f64 {
    let ch = cube.channel(day, precip);
    ch.iter().sum::<f64>() / ch.len() as f64
}

/// Cuts one sample per admissible anchor, ordered by target date. Inputs are
/// copied unscaled; scaling is applied later with training statistics.
pub fn assemble_sequences(cube: &FeatureCube, seq_len: usize, precip: &str) -> Result<Assembly> {
    let p = cube
        .feature_index(precip)
        .ok_or_else(|| Error::invalid(format!("precipitation channel `{precip}` missing")))?;
    let anchors = admissible_anchors(cube, seq_len);
    let mut out = Assembly::default();
    if anchors.is_empty() {
        out.warnings.push(format!(
            "no admissible sequences: need {} consecutive valid days, cube has {}",
            seq_len + 1,
            cube.num_days()
        ));
        return Ok(out);
    }
    let shape = vec![seq_len, cube.height, cube.width, cube.num_features()];
    for t in anchors {
        let mut data = Vec::with_capacity(seq_len * cube.day_len());
        for d in t + 1 - seq_len..=t {
            data.extend_from_slice(cube.day(d));
        }
        let y = log1p_target(area_mean(cube, t + 1, p))?;
        let target_date = cube.dates[t + 1];
        out.samples.push(SequenceSample {
            x: Tensor::new(shape.clone(), data)?,
            y,
            target_date,
        });
        out.index.push(SampleIndex { anchor: t, target_date });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(days: usize, value: impl Fn(usize) -> f64) -> FeatureCube {
        let start = NaiveDate::from_ymd_opt(2000, 6, 1).unwrap();
        let dates = start.iter_days().take(days).collect();
        let data = (0..days).flat_map(|d| [value(d); 4]).collect();
        FeatureCube::new(dates, 2, 2, vec!["tp".into()], data).unwrap()
    }

    #[test]
    fn counting() {
        assert_eq!(assemble_sequences(&cube(8, |_| 1.0), 7, "tp").unwrap().samples.len(), 1);
        assert_eq!(assemble_sequences(&cube(30, |_| 1.0), 7, "tp").unwrap().samples.len(), 23);
        let short = assemble_sequences(&cube(7, |_| 1.0), 7, "tp").unwrap();
        assert!(short.samples.is_empty() && !short.warnings.is_empty());
    }

    #[test]
    fn target_is_log1p_of_next_day_mean() {
        let a = assemble_sequences(&cube(8, |d| if d == 7 { 3.0 } else { 0.0 }), 7, "tp").unwrap();
        assert!((a.samples[0].y - 1.386294361119890).abs() < 1e-12);
        assert_eq!(a.samples[0].target_date, NaiveDate::from_ymd_opt(2000, 6, 8).unwrap());
        assert_eq!(a.samples[0].step_date(6), NaiveDate::from_ymd_opt(2000, 6, 7).unwrap());
    }

    #[test]
    fn log_transform_pair() {
        assert_eq!(log1p_target(0.0).unwrap(), 0.0);
        assert!((expm1_inverse(log1p_target(7.3).unwrap()).0 - 7.3).abs() < 1e-12);
        assert_eq!(expm1_inverse(-0.01), (0.0, true));
        assert!(log1p_target(-0.5).is_err());
    }
}
