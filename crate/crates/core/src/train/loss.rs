use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::stats;

pub const DEFAULT_TAU_PERCENTILE: f64 = 90.0;
pub const DEFAULT_ALPHA: f64 = 5.0;
/// Fewest training targets from which a percentile threshold is taken.
pub const MIN_TAU_SAMPLES: usize = 10;

/// Extreme-event weighting: targets at or above `tau` (log space) get
/// weight `alpha`, all others 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_percentile: f64,
    pub alpha: f64,
    pub tau: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_percentile: DEFAULT_TAU_PERCENTILE,
            alpha: DEFAULT_ALPHA,
            tau: None,
        }
    }
}

impl LossConfig {
    pub fn resolved(alpha: f64, tau: f64) -> Self {
        Self {
            alpha,
            tau: Some(tau),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be ≥ 1, got {}", self.alpha)));
        }
        if !(0.0..=100.0).contains(&self.tau_percentile) {
            return Err(Error::invalid(format!(
                "tau percentile must be in [0, 100], got {}",
                self.tau_percentile
            )));
        }
        Ok(())
    }

    /// Sets `tau` from training targets and returns it.
    pub fn resolve(&mut self, train_targets: &[f64]) -> Result<f64> {
        self.validate()?;
        let tau = compute_tau(train_targets, self.tau_percentile)?;
        self.tau = Some(tau);
        Ok(tau)
    }

    pub fn tau(&self) -> Result<f64> {
        self.tau
            .ok_or_else(|| Error::invalid("loss threshold tau has not been resolved"))
    }

    pub fn weight(&self, y: f64) -> Result<f64> {
        Ok(if y >= self.tau()? { self.alpha } else { 1.0 })
    }
}

/// Percentile of the training targets under linear interpolation.
pub fn compute_tau(train_targets: &[f64], percentile: f64) -> Result<f64> {
    if train_targets.len() < MIN_TAU_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "tau needs at least {MIN_TAU_SAMPLES} training targets, got {}",
            train_targets.len()
        )));
    }
    stats::quantile(train_targets, percentile / 100.0)
        .ok_or_else(|| Error::InsufficientData("no training targets".into()))
}

/// `(1/N) Σ w_i (y_i − ŷ_i)²`.
pub fn weighted_mse(y: &[f64], y_hat: &[f64], cfg: &LossConfig) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("weighted_mse of an empty batch"));
    }
    if y.len() != y_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_mse",
            left: vec![y.len()],
            right: vec![y_hat.len()],
        });
    }
    let tau = cfg.tau()?;
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            let w = if t >= tau { cfg.alpha } else { 1.0 };
            w * (t - p) * (t - p)
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// One sample's contribution `w (y − ŷ)² / batch` recorded on `tape`.
pub fn sample_loss_taped(tape: &mut Tape, prediction: Var, y: f64, weight: f64, batch: usize) -> Result<Var> {
    let target = tape.constant(crate::tensor::Tensor::from_vec(vec![y]));
    let r = tape.sub(prediction, target)?;
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, weight / batch as f64))
}
