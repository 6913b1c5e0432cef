use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Chronological train/validation/test boundaries over date-ordered samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
    pub train_last_date: Option<NaiveDate>,
    pub val_first_date: Option<NaiveDate>,
    pub test_first_date: Option<NaiveDate>,
}

impl SplitSpec {
    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.total
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train().len(), self.val().len(), self.test().len()]
    }
}

/// Boundaries `floor(f_train·N)` and `floor((f_train+f_val)·N)`.
///
/// `dates` are the samples' target dates and must be strictly increasing.
pub fn chronological_split(dates: &[NaiveDate], fractions: [f64; 3]) -> Result<SplitSpec> {
    let n = dates.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "chronological split needs at least 3 samples, got {n}"
        )));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    if dates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("samples must be strictly date-ordered"));
    }
    // Small epsilon keeps e.g. 0.7·100 from landing on 69.999….
    let boundary = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let train_end = boundary(fractions[0]).clamp(1, n - 2);
    let val_end = boundary(fractions[0] + fractions[1]).clamp(train_end + 1, n - 1);
    Ok(SplitSpec {
        fractions,
        train_end,
        val_end,
        total: n,
        train_last_date: Some(dates[train_end - 1]),
        val_first_date: Some(dates[train_end]),
        test_first_date: Some(dates[val_end]),
    })
}
