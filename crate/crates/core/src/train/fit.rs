use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, OptimizerState};
use super::loss::{sample_loss_taped, weighted_mse, LossConfig};
use super::metrics::predict;
use crate::autodiff::Tape;
use crate::data::sequence::SequenceSample;
use crate::error::{Error, Result};
use crate::nn::{dropout_mask, Model};
use crate::rng::{self, Stream};
use crate::stats;
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_EARLY_STOP_PATIENCE: usize = 3;
pub const DEFAULT_PLATEAU_FACTOR: f64 = 0.5;
pub const DEFAULT_PLATEAU_PATIENCE: usize = 2;
pub const DEFAULT_MIN_DELTA: f64 = 1e-6;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const LEARNING_RATE_CHOICES: [f64; 2] = [1e-3, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Start the output bias at the mean training target.
    pub init_output_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            early_stop_patience: DEFAULT_EARLY_STOP_PATIENCE,
            plateau_factor: DEFAULT_PLATEAU_FACTOR,
            plateau_patience: DEFAULT_PLATEAU_PATIENCE,
            min_delta: DEFAULT_MIN_DELTA,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            init_output_bias: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(Error::invalid("epochs, batch size and patiences must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!(
                "plateau factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and min_delta non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub history: History,
}

/// Loss and per-parameter gradients of one sample's `w (y − ŷ)² / batch`.
pub fn sample_gradients(
    model: &Model,
    sample: &SequenceSample,
    weight: f64,
    batch: usize,
    mask: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let trace = model.forward_taped(&mut tape, &sample.x, true, mask)?;
    let loss = sample_loss_taped(&mut tape, trace.prediction, sample.y, weight, batch)?;
    let mut grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, trace.params.iter().map(|&p| grads.take(p)).collect()))
}

/// Validation loss in log space with dropout off.
pub fn validation_loss(model: &Model, samples: &[SequenceSample], loss: &LossConfig) -> Result<f64> {
    let pred = predict(model, samples)?;
    let y: Vec<f64> = samples.iter().map(|s| s.y).collect();
    weighted_mse(&y, &pred, loss)
}

/// Adam on shuffled mini-batches of the weighted MSE with plateau learning
/// rate halving and early stopping; the returned model carries the weights
/// of the best validation epoch.
///
/// Per-sample gradients are computed in parallel and summed in sample order,
/// so results do not depend on the thread count.
pub fn fit(
    mut model: Model,
    train: &[SequenceSample],
    val: &[SequenceSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("fit needs non-empty training and validation samples".into()));
    }
    let mut loss = loss.clone();
    if loss.tau.is_none() {
        loss.resolve(&train.iter().map(|s| s.y).collect::<Vec<_>>())?;
    }
    let weights: Vec<f64> = train.iter().map(|s| loss.weight(s.y)).collect::<Result<_>>()?;
    if cfg.init_output_bias {
        let mean = stats::mean(&train.iter().map(|s| s.y).collect::<Vec<_>>());
        model.head.bias.data_mut()[0] = mean;
    }

    let rate = model.config.dropout_rate;
    let pooled_len = model.config.convlstm_filters;
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(cfg.seed, Stream::Dropout);
    let mut state = OptimizerState::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let (mut since_best, mut since_reduce) = (0usize, 0usize);
    let mut history = History::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let masks: Vec<Option<Tensor>> = batch
                .iter()
                .map(|_| (rate > 0.0).then(|| dropout_mask(pooled_len, rate, &mut dropout_rng)).transpose())
                .collect::<Result<_>>()?;
            let model_ref = &model;
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .zip(masks.par_iter())
                .map(|(&i, mask)| sample_gradients(model_ref, &train[i], weights[i], batch.len(), mask.as_ref()))
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            let mut batch_loss = first_loss;
            for (l, g) in iter {
                batch_loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.axpy(1.0, gi)?;
                }
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let mut params = model.params_mut();
            adam_step(&mut params, &grads, &Model::PARAM_NAMES, &mut state, lr)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = validation_loss(&model, val, &loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, epoch, model.clone());
            since_best = 0;
            since_reduce = 0;
        } else {
            since_best += 1;
            since_reduce += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
            if since_reduce >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                since_reduce = 0;
            }
        }
    }
    history.best_epoch = best.1;
    history.best_val_loss = best.0;
    Ok(FitOutcome { model: best.2, history })
}
