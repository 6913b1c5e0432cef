use serde::{Deserialize, Serialize};

use crate::data::sequence::{expm1_inverse, SequenceSample};
use crate::error::{Error, Result};
use crate::nn::Regressor;
use crate::stats;
use crate::tensor::Tensor;

/// Errors in mm/day, after undoing the `log1p` target transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extreme_rmse: Option<f64>,
    pub n_samples: usize,
    pub n_extreme: usize,
    /// Extreme-event threshold `expm1(τ)` in mm/day.
    pub threshold_mm: f64,
}

/// Metrics from log-space predictions and targets. The extreme subset is
/// every sample whose target is at least `expm1(tau)` mm/day.
pub fn metrics_from_log(pred_log: &[f64], target_log: &[f64], tau: f64) -> Result<Metrics> {
    if pred_log.is_empty() {
        return Err(Error::invalid("cannot evaluate on zero samples"));
    }
    if pred_log.len() != target_log.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            left: vec![pred_log.len()],
            right: vec![target_log.len()],
        });
    }
    let pred: Vec<f64> = pred_log.iter().map(|&p| expm1_inverse(p).0).collect();
    let target: Vec<f64> = target_log.iter().map(|&y| expm1_inverse(y).0).collect();
    let threshold_mm = tau.exp_m1();
    let (ep, et): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(&target)
        .filter(|(_, &t)| t >= threshold_mm)
        .map(|(p, t)| (*p, *t))
        .unzip();
    Ok(Metrics {
        rmse: stats::rmse(&pred, &target),
        extreme_rmse: (!et.is_empty()).then(|| stats::rmse(&ep, &et)),
        n_samples: pred.len(),
        n_extreme: et.len(),
        threshold_mm,
    })
}

pub fn predict(model: &(impl Regressor + ?Sized), samples: &[SequenceSample]) -> Result<Vec<f64>> {
    let xs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
    model.predict_many(&xs)
}

pub fn evaluate(model: &(impl Regressor + ?Sized), samples: &[SequenceSample], tau: f64) -> Result<Metrics> {
    let pred = predict(model, samples)?;
    let target: Vec<f64> = samples.iter().map(|s| s.y).collect();
    metrics_from_log(&pred, &target, tau)
}

/// Baseline that always predicts the mean training target (log space).
pub fn mean_predictor_metrics(train: &[SequenceSample], samples: &[SequenceSample], tau: f64) -> Result<Metrics> {
    if train.is_empty() {
        return Err(Error::invalid("mean predictor needs training samples"));
    }
    let mean = stats::mean(&train.iter().map(|s| s.y).collect::<Vec<_>>());
    let target: Vec<f64> = samples.iter().map(|s| s.y).collect();
    metrics_from_log(&vec![mean; target.len()], &target, tau)
}
