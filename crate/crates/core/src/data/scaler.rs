use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::sequence::SequenceSample;
use crate::error::{Error, Result};
use crate::stats;
use crate::tensor::Tensor;

/// Interquartile ranges below this are replaced by 1.
pub const MIN_IQR: f64 = 1e-9;

/// Per-channel median and interquartile range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
}

impl ScalerParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            median: vec![0.0; channels],
            iqr: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.median.len()
    }

    /// Fits on per-channel value lists.
    pub fn fit_channels(columns: &[Vec<f64>]) -> Result<Self> {
        let mut median = Vec::with_capacity(columns.len());
        let mut iqr = Vec::with_capacity(columns.len());
        for (c, col) in columns.iter().enumerate() {
            if col.is_empty() {
                return Err(Error::InsufficientData(format!("no values for channel {c}")));
            }
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            median.push(stats::quantile_sorted(&sorted, 0.5));
            let spread = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
            iqr.push(if spread < MIN_IQR { 1.0 } else { spread });
        }
        Ok(Self { median, iqr })
    }

    /// `(x − median) / IQR` along the last axis.
    pub fn transform(&self, x: &mut Tensor) -> Result<()> {
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(Error::ShapeMismatch {
                op: "robust_transform",
                left: vec![c],
                right: x.shape().to_vec(),
            });
        }
        for px in x.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.median).zip(&self.iqr) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    pub fn transform_values(&self, channel: usize, values: &mut [f64]) {
        let (m, s) = (self.median[channel], self.iqr[channel]);
        values.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Fits the scaler on the distinct days covered by the training samples'
/// input windows (overlapping windows contribute each day once).
pub fn robust_fit(train: &[SequenceSample]) -> Result<ScalerParams> {
    let first = train
        .first()
        .ok_or_else(|| Error::InsufficientData("robust_fit needs training samples".into()))?;
    let shape = first.x.shape();
    let (t, day_len, c) = (shape[0], shape[1] * shape[2] * shape[3], shape[3]);
    let mut seen = BTreeSet::new();
    let mut columns = vec![Vec::new(); c];
    for s in train {
        for step in 0..t {
            if !seen.insert(s.step_date(step)) {
                continue;
            }
            let day = &s.x.data()[step * day_len..(step + 1) * day_len];
            for px in day.chunks_exact(c) {
                for (col, v) in columns.iter_mut().zip(px) {
                    col.push(*v);
                }
            }
        }
    }
    ScalerParams::fit_channels(&columns)
}

pub fn robust_transform(samples: &mut [SequenceSample], params: &ScalerParams) -> Result<()> {
    samples.iter_mut().try_for_each(|s| params.transform(&mut s.x))
}
