use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::fit::{fit, TrainConfig};
use super::loss::LossConfig;
use super::metrics::{evaluate, Metrics};
use crate::data::scaler::{robust_fit, robust_transform};
use crate::data::sequence::SequenceSample;
use crate::data::split::chronological_split;
use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig};
use crate::rng::{derive_seed, Stream};

pub const DEFAULT_FOLDS: usize = 3;
/// Share of each fold's training window held out (chronologically last) for
/// early stopping, matching the 70:15 ratio of the main split.
pub const INNER_FRACTIONS: [f64; 3] = [0.70 / 0.85, 0.075 / 0.85, 0.075 / 0.85];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvFold {
    pub index: usize,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Expanding windows: fold `j` (1-based) trains on the first `j/(k+1)` of
/// the samples and tests on the next `1/(k+1)`.
pub fn expanding_folds(n: usize, k: usize) -> Result<Vec<CvFold>> {
    if k == 0 {
        return Err(Error::invalid("cross-validation needs at least one fold"));
    }
    let bound = |j: usize| j * n / (k + 1);
    if bound(1) < 10 || bound(1) == bound(0) {
        return Err(Error::InsufficientData(format!(
            "{n} samples are too few for {k} expanding folds"
        )));
    }
    Ok((1..=k)
        .map(|j| CvFold {
            index: j - 1,
            train: 0..bound(j),
            test: bound(j)..bound(j + 1),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub test: Metrics,
    pub tau: f64,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_rmse: f64,
}

/// One fold's scaled partitions: the training window is split into inner
/// train/validation, the scaler is fitted on the inner training part only.
pub fn fold_partitions(
    raw: &[SequenceSample],
    fold: &CvFold,
) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>, Vec<SequenceSample>)> {
    let window = &raw[fold.train.clone()];
    let dates: Vec<_> = window.iter().map(|s| s.target_date).collect();
    let inner = chronological_split(&dates, INNER_FRACTIONS)?;
    let scaler = robust_fit(&window[inner.train()])?;
    let mut train = window[inner.train()].to_vec();
    // Inner "test" remainder joins validation: the window has no test role.
    let mut val = window[inner.train_end..].to_vec();
    let mut test = raw[fold.test.clone()].to_vec();
    robust_transform(&mut train, &scaler)?;
    robust_transform(&mut val, &scaler)?;
    robust_transform(&mut test, &scaler)?;
    Ok((train, val, test))
}

/// Expanding-window cross-validation over unscaled, date-ordered samples.
/// `save` receives each fold's trained model and returns a checkpoint
/// reference to record.
pub fn ts_cross_validate(
    raw: &[SequenceSample],
    k: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut save: impl FnMut(usize, &Model) -> Result<Option<String>>,
) -> Result<CvReport> {
    let folds = expanding_folds(raw.len(), k)?;
    let mut results = Vec::with_capacity(folds.len());
    for fold in &folds {
        let (train, val, test) = fold_partitions(raw, fold)?;
        let mut loss = loss_cfg.clone();
        let tau = loss.resolve(&train.iter().map(|s| s.y).collect::<Vec<_>>())?;
        let cfg = TrainConfig {
            seed: derive_seed(train_cfg.seed, Stream::Shuffle, fold.index as u64 + 1),
            ..train_cfg.clone()
        };
        let model = Model::init(model_cfg.clone(), derive_seed(train_cfg.seed, Stream::Init, fold.index as u64 + 1))?;
        let out = fit(model, &train, &val, &cfg, &loss)?;
        let test_metrics = evaluate(&out.model, &test, tau)?;
        results.push(FoldResult {
            fold: fold.index,
            best_epoch: out.history.best_epoch,
            train_losses: out.history.train_losses(),
            val_losses: out.history.val_losses(),
            test: test_metrics,
            tau,
            checkpoint: save(fold.index, &out.model)?,
        });
    }
    let mean_rmse = results.iter().map(|r| r.test.rmse).sum::<f64>() / results.len() as f64;
    Ok(CvReport {
        folds: results,
        mean_rmse,
    })
}
