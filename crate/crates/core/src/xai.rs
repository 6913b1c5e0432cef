//! Post-hoc explanations: permutation importance, temporal occlusion,
//! Grad-CAM on the final ConvLSTM hidden state and counterfactual
//! perturbation. Every error and norm is in mm/day.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::scaler::ScalerParams;
use crate::data::sequence::{expm1_inverse, SequenceSample};
use crate::error::{Error, Result};
use crate::nn::{Model, Regressor};
use crate::rng::{self, Stream};
use crate::stats;
use crate::tensor::Tensor;

pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_DECILE: f64 = 0.1;

fn to_mm(log: &[f64]) -> Vec<f64> {
    log.iter().map(|&v| expm1_inverse(v).0).collect()
}

fn targets_mm(samples: &[SequenceSample]) -> Vec<f64> {
    samples.iter().map(|s| s.target_mm()).collect()
}

fn predict_mm(model: &(impl Regressor + ?Sized), xs: &[Tensor]) -> Result<Vec<f64>> {
    let refs: Vec<&Tensor> = xs.iter().collect();
    Ok(to_mm(&model.predict_many(&refs)?))
}

fn baseline_mm(model: &(impl Regressor + ?Sized), samples: &[SequenceSample]) -> Result<Vec<f64>> {
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
    Ok(to_mm(&model.predict_many(&refs)?))
}

fn check_names(samples: &[SequenceSample], names: &[String]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("explanations need at least one sample"))?;
    let f = *first.x.shape().last().expect("rank-4 input");
    if names.len() != f {
        return Err(Error::invalid(format!("{} feature names for {f} channels", names.len())));
    }
    Ok(f)
}

/// Indices ordered by descending key, ties by position.
fn ranked<T>(items: &[T], key: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| key(&items[b]).total_cmp(&key(&items[a])).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub channel: usize,
    pub mean_delta_rmse: f64,
    pub std_delta_rmse: f64,
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub baseline_rmse: f64,
    pub repeats: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub features: Vec<FeatureImportance>,
}

impl FeatureImportanceReport {
    /// Channel indices ordered by decreasing mean ΔRMSE.
    pub fn ranking(&self) -> Vec<usize> {
        ranked(&self.features, |f| f.mean_delta_rmse)
    }

    pub fn to_csv(&self, sorted: bool) -> String {
        let mut out = String::from("feature,channel,mean_delta_rmse_mm,std_delta_rmse_mm\n");
        let order: Vec<usize> = if sorted { self.ranking() } else { (0..self.features.len()).collect() };
        for i in order {
            let f = &self.features[i];
            let _ = writeln!(out, "{},{},{},{}", f.feature, f.channel, f.mean_delta_rmse, f.std_delta_rmse);
        }
        out
    }
}

/// Channel `f` of every sample moves as one `T×H×W` block to the sample
/// chosen by the permutation.
fn permuted_inputs(samples: &[SequenceSample], f: usize, perm: &[usize]) -> Vec<Tensor> {
    let c = *samples[0].x.shape().last().expect("rank-4 input");
    perm.iter()
        .enumerate()
        .map(|(i, &src)| {
            let mut x = samples[i].x.clone();
            let from = samples[src].x.data();
            for (j, v) in x.data_mut().iter_mut().enumerate().skip(f).step_by(c) {
                *v = from[j];
            }
            x
        })
        .collect()
}

pub fn permutation_importance(
    model: &(impl Regressor + ?Sized),
    samples: &[SequenceSample],
    names: &[String],
    repeats: usize,
    seed: u64,
) -> Result<FeatureImportanceReport> {
    permutation_importance_with(model, samples, names, repeats, seed, |f, r, perm| {
        // Independent stream per (channel, repeat): reports do not depend on
        // channel order or count.
        let mut rng = rng::sub_stream(seed, Stream::Permutation, ((f as u64) << 32) | r as u64);
        perm.shuffle(&mut rng);
    })
}

/// Permutation importance with a caller-supplied shuffle:
/// `permute(channel, repeat, perm)` reorders `perm`, which starts as the
/// identity for every repeat.
pub fn permutation_importance_with(
    model: &(impl Regressor + ?Sized),
    samples: &[SequenceSample],
    names: &[String],
    repeats: usize,
    seed: u64,
    mut permute: impl FnMut(usize, usize, &mut [usize]),
) -> Result<FeatureImportanceReport> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("permutation importance needs at least 2 samples".into()));
    }
    if repeats == 0 {
        return Err(Error::invalid("permutation importance needs at least one repeat"));
    }
    let f_count = check_names(samples, names)?;
    let target = targets_mm(samples);
    let baseline_rmse = stats::rmse(&baseline_mm(model, samples)?, &target);
    let mut features = Vec::with_capacity(f_count);
    for f in 0..f_count {
        let mut deltas = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut perm: Vec<usize> = (0..samples.len()).collect();
            permute(f, r, &mut perm);
            let xs = permuted_inputs(samples, f, &perm);
            deltas.push(stats::rmse(&predict_mm(model, &xs)?, &target) - baseline_rmse);
        }
        features.push(FeatureImportance {
            feature: names[f].clone(),
            channel: f,
            mean_delta_rmse: stats::mean(&deltas),
            std_delta_rmse: stats::std_dev(&deltas),
            deltas,
        });
    }
    Ok(FeatureImportanceReport {
        baseline_rmse,
        repeats,
        seed,
        n_samples: samples.len(),
        features,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOcclusion {
    pub label: String,
    pub step: usize,
    pub delta_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub baseline_rmse: f64,
    pub n_samples: usize,
    /// `time_0 … time_{T−1}`, the last being the most recent day.
    pub steps: Vec<StepOcclusion>,
}

impl OcclusionReport {
    pub fn argmax(&self) -> usize {
        ranked(&self.steps, |s| s.delta_rmse)[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,label,delta_rmse_mm\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{}", s.step, s.label, s.delta_rmse);
        }
        out
    }
}

/// Per-cell, per-channel mean over all training samples and steps:
/// an `H×W×F` slice.
pub fn mean_slice(train: &[SequenceSample]) -> Result<Tensor> {
    let first = train
        .first()
        .ok_or_else(|| Error::invalid("mean slice needs training samples"))?;
    let shape = first.x.shape();
    let n = shape[1] * shape[2] * shape[3];
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for s in train {
        for chunk in s.x.data().chunks_exact(n) {
            acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Tensor::new(shape[1..].to_vec(), acc)
}

pub fn temporal_occlusion(
    model: &(impl Regressor + ?Sized),
    samples: &[SequenceSample],
    fill: &Tensor,
) -> Result<OcclusionReport> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("temporal occlusion needs samples"))?;
    let t_len = first.x.shape()[0];
    let n = fill.len();
    if first.x.shape()[1..] != *fill.shape() {
        return Err(Error::ShapeMismatch {
            op: "temporal_occlusion",
            left: first.x.shape()[1..].to_vec(),
            right: fill.shape().to_vec(),
        });
    }
    let target = targets_mm(samples);
    let baseline_rmse = stats::rmse(&baseline_mm(model, samples)?, &target);
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xs: Vec<Tensor> = samples
            .iter()
            .map(|s| {
                let mut x = s.x.clone();
                x.data_mut()[t * n..(t + 1) * n].copy_from_slice(fill.data());
                x
            })
            .collect();
        steps.push(StepOcclusion {
            label: format!("time_{t}"),
            step: t,
            delta_rmse: stats::rmse(&predict_mm(model, &xs)?, &target) - baseline_rmse,
        });
    }
    Ok(OcclusionReport {
        baseline_rmse,
        n_samples: samples.len(),
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCamMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W`, in `[0, 1]`.
    pub values: Vec<f64>,
    /// Average of the raw rectified maps before normalization.
    pub raw: Vec<f64>,
    /// Indices (into the evaluated samples) of the averaged predictions.
    pub selected: Vec<usize>,
    pub decile: f64,
    /// Set when the raw map is identically zero.
    pub all_zero: bool,
}

impl GradCamMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Mean inside a rectangular block and mean of the remaining cells.
    pub fn inside_outside(&self, rows: (usize, usize), cols: (usize, usize)) -> (f64, f64) {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                if (rows.0..rows.1).contains(&r) && (cols.0..cols.1).contains(&c) {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    pub fn to_matrix(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.get(r, c).to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,attention\n");
        for r in 0..self.height {
            for c in 0..self.width {
                let _ = writeln!(out, "{r},{c},{}", self.get(r, c));
            }
        }
        out
    }

    /// Plain (ASCII) PGM with 255 grey levels.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|c| ((self.get(r, c) * 255.0).round() as u8).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Indices of the top `decile` share of predictions (at least one),
/// highest first.
pub fn top_predictions(pred: &[f64], decile: f64) -> Result<Vec<usize>> {
    if pred.is_empty() {
        return Err(Error::invalid("cannot select from zero predictions"));
    }
    if !(decile > 0.0 && decile <= 1.0) {
        return Err(Error::invalid(format!("selection share must be in (0, 1], got {decile}")));
    }
    let k = ((pred.len() as f64 * decile - 1e-9).ceil() as usize).clamp(1, pred.len());
    let mut order = ranked(pred, |&p| p);
    order.truncate(k);
    Ok(order)
}

/// Raw rectified Grad-CAM map of one sample: `ReLU(Σ_k α_k A^k)` with
/// `α_k` the spatial mean of `∂ŷ/∂A^k` and `A = H_T`.
pub fn grad_cam_raw(model: &Model, x: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let trace = model.forward_taped(&mut tape, x, true, None)?;
    let grads = tape.backward(trace.prediction)?;
    let h_var = trace.hidden_final();
    let a = tape.value(h_var);
    let g = grads.get(h_var);
    Ok(weighted_activation(a, &g))
}

/// `ReLU(Σ_k mean_{ij}(G^k) · A^k)` for `H×W×K` activations and gradients.
pub fn weighted_activation(a: &Tensor, g: &Tensor) -> Vec<f64> {
    let k = *a.shape().last().expect("rank-3 map");
    let cells = a.len() / k;
    let mut alpha = vec![0.0; k];
    for px in g.data().chunks_exact(k) {
        alpha.iter_mut().zip(px).for_each(|(s, v)| *s += v);
    }
    alpha.iter_mut().for_each(|s| *s /= cells as f64);
    a.data()
        .chunks_exact(k)
        .map(|px| px.iter().zip(&alpha).map(|(v, w)| v * w).sum::<f64>().max(0.0))
        .collect()
}

/// Min-max normalization; an identically zero map stays zero and is
/// flagged, any other constant map becomes all ones.
pub fn normalize_map(raw: &[f64]) -> (Vec<f64>, bool) {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return (vec![0.0; raw.len()], true);
    }
    if max == min {
        return (vec![1.0; raw.len()], false);
    }
    (raw.iter().map(|v| (v - min) / (max - min)).collect(), false)
}

pub fn grad_cam(model: &Model, samples: &[SequenceSample], decile: f64) -> Result<GradCamMap> {
    let pred = {
        let refs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
        model.predict_many(&refs)?
    };
    let selected = top_predictions(&pred, decile)?;
    let maps: Vec<Vec<f64>> = selected
        .par_iter()
        .map(|&i| grad_cam_raw(model, &samples[i].x))
        .collect::<Result<_>>()?;
    let (h, w) = (model.config.height, model.config.width);
    let mut raw = vec![0.0; h * w];
    for m in &maps {
        raw.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    raw.iter_mut().for_each(|a| *a /= maps.len() as f64);
    let (values, all_zero) = normalize_map(&raw);
    Ok(GradCamMap {
        height: h,
        width: w,
        values,
        raw,
        selected,
        decile,
        all_zero,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCounterfactual {
    pub feature: String,
    pub channel: usize,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub delta: f64,
    pub n_samples: usize,
    /// `native` when the reduction is applied in the variable's own units,
    /// `model_input` when applied to the scaled inputs directly.
    pub space: String,
    /// Always `rms`: the L2 norm of prediction changes divided by √N.
    pub normalization: String,
    pub features: Vec<FeatureCounterfactual>,
}

impl CounterfactualReport {
    pub fn ranking(&self) -> Vec<usize> {
        ranked(&self.features, |f| f.norm)
    }

    pub fn to_csv(&self, sorted: bool) -> String {
        let mut out = String::from("feature,channel,l2_norm_mm,delta\n");
        let order: Vec<usize> = if sorted { self.ranking() } else { (0..self.features.len()).collect() };
        for i in order {
            let f = &self.features[i];
            let _ = writeln!(out, "{},{},{},{}", f.feature, f.channel, f.norm, self.delta);
        }
        out
    }
}

/// Reduces each channel by the factor `1 − δ` with everything else fixed and
/// reports the RMS change of predicted rainfall. With `scaler` the reduction
/// applies to native units (`x ↦ (1−δ)x` before scaling), otherwise to the
/// model inputs as given.
pub fn counterfactual_perturb(
    model: &(impl Regressor + ?Sized),
    samples: &[SequenceSample],
    names: &[String],
    delta: f64,
    scaler: Option<&ScalerParams>,
) -> Result<CounterfactualReport> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::invalid(format!("δ must be in [0, 1), got {delta}")));
    }
    let f_count = check_names(samples, names)?;
    if let Some(s) = scaler {
        if s.channels() != f_count {
            return Err(Error::invalid("scaler channel count differs from the inputs"));
        }
    }
    let base = baseline_mm(model, samples)?;
    let mut features = Vec::with_capacity(f_count);
    for f in 0..f_count {
        let xs: Vec<Tensor> = samples
            .iter()
            .map(|s| {
                let mut x = s.x.clone();
                for v in x.data_mut().iter_mut().skip(f).step_by(f_count) {
                    *v = match scaler {
                        // ((1−δ)(v·iqr + m) − m) / iqr
                        Some(p) => {
                            let (m, q) = (p.median[f], p.iqr[f]);
                            ((1.0 - delta) * (*v * q + m) - m) / q
                        }
                        None => (1.0 - delta) * *v,
                    };
                }
                x
            })
            .collect();
        let pert = predict_mm(model, &xs)?;
        let ss: f64 = pert.iter().zip(&base).map(|(a, b)| (a - b) * (a - b)).sum();
        features.push(FeatureCounterfactual {
            feature: names[f].clone(),
            channel: f,
            norm: (ss / samples.len() as f64).sqrt(),
        });
    }
    Ok(CounterfactualReport {
        delta,
        n_samples: samples.len(),
        space: if scaler.is_some() { "native" } else { "model_input" }.into(),
        normalization: "rms".into(),
        features,
    })
}
