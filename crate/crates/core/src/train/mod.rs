//! Weighted-MSE training with Adam, evaluation metrics and expanding-window
//! cross-validation.

pub mod adam;
pub mod cv;
pub mod fit;
pub mod loss;
pub mod metrics;

pub use adam::{adam_step, OptimizerState};
pub use cv::{expanding_folds, ts_cross_validate, CvFold, CvReport, FoldResult};
pub use fit::{fit, EpochRecord, FitOutcome, History, TrainConfig};
pub use loss::{compute_tau, weighted_mse, LossConfig};
pub use metrics::{evaluate, mean_predictor_metrics, Metrics};
