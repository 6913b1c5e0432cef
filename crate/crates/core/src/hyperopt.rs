//! Sequential model-based hyperparameter search.
//!
//! The first trials follow a balanced quasi-random design; afterwards a
//! tree-structured Parzen estimator splits the history at the 30th
//! percentile objective and proposes the candidate with the largest
//! good/bad density ratio.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::data::sequence::SequenceSample;
use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig, CONVLSTM_FILTER_CHOICES, CONV_FILTER_CHOICES, KERNEL_SIZE_CHOICES, MAX_DROPOUT};
use crate::rng::{self, derive_seed, Stream};
use crate::stats;
use crate::train::fit::{fit, TrainConfig, LEARNING_RATE_CHOICES};
use crate::train::loss::LossConfig;
use crate::train::metrics::evaluate;

pub const DEFAULT_TRIALS: usize = 20;
pub const STARTUP_TRIALS: usize = 8;
pub const GAMMA: f64 = 0.3;
pub const CANDIDATES: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub conv_filters: Vec<usize>,
    pub convlstm_filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropout: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            conv_filters: CONV_FILTER_CHOICES.to_vec(),
            convlstm_filters: CONVLSTM_FILTER_CHOICES.to_vec(),
            kernel_sizes: KERNEL_SIZE_CHOICES.to_vec(),
            learning_rates: LEARNING_RATE_CHOICES.to_vec(),
            dropout: (0.0, MAX_DROPOUT),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let empty = self.conv_filters.is_empty()
            || self.convlstm_filters.is_empty()
            || self.kernel_sizes.is_empty()
            || self.learning_rates.is_empty();
        if empty {
            return Err(Error::invalid("every categorical dimension needs at least one choice"));
        }
        let (lo, hi) = self.dropout;
        if !(0.0 <= lo && lo <= hi && hi <= MAX_DROPOUT) {
            return Err(Error::invalid(format!("dropout range ({lo}, {hi}) outside [0, {MAX_DROPOUT}]")));
        }
        let outside = self.conv_filters.iter().any(|c| !CONV_FILTER_CHOICES.contains(c))
            || self.convlstm_filters.iter().any(|c| !CONVLSTM_FILTER_CHOICES.contains(c))
            || self.kernel_sizes.iter().any(|k| !KERNEL_SIZE_CHOICES.contains(k))
            || self.learning_rates.iter().any(|r| !LEARNING_RATE_CHOICES.contains(r));
        if outside {
            return Err(Error::invalid("search space choices must lie within the model bounds"));
        }
        Ok(())
    }

    fn cardinalities(&self) -> [usize; 4] {
        [
            self.conv_filters.len(),
            self.convlstm_filters.len(),
            self.kernel_sizes.len(),
            self.learning_rates.len(),
        ]
    }
}

/// One point of the search space, stored by value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub conv_filters: usize,
    pub convlstm_filters: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
}

impl TrialConfig {
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            conv_filters: self.conv_filters,
            convlstm_filters: self.convlstm_filters,
            kernel_size: self.kernel_size,
            dropout_rate: self.dropout_rate,
            ..base.clone()
        }
    }

    /// Choice indices of the categorical dimensions.
    fn indices(&self, space: &SearchSpace) -> [usize; 4] {
        let pos = |v: &[usize], x: usize| v.iter().position(|&c| c == x).unwrap_or(0);
        [
            pos(&space.conv_filters, self.conv_filters),
            pos(&space.convlstm_filters, self.convlstm_filters),
            pos(&space.kernel_sizes, self.kernel_size),
            space
                .learning_rates
                .iter()
                .position(|&r| r == self.learning_rate)
                .unwrap_or(0),
        ]
    }

    fn from_indices(space: &SearchSpace, idx: [usize; 4], dropout_rate: f64) -> Self {
        Self {
            conv_filters: space.conv_filters[idx[0]],
            convlstm_filters: space.convlstm_filters[idx[1]],
            kernel_size: space.kernel_sizes[idx[2]],
            learning_rate: space.learning_rates[idx[3]],
            dropout_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: TrialConfig,
    /// Best validation loss; absent for diverged trials.
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_rmse: Option<f64>,
    /// Seconds; kept out of the serialized log so logs are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl Trial {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

/// Balanced design for the startup trials: every categorical choice appears
/// `⌊n/m⌋` or `⌈n/m⌉` times, dropout is stratified over `n` equal bins, and
/// each dimension is shuffled independently.
pub fn startup_design(space: &SearchSpace, n: usize, seed: u64) -> Vec<TrialConfig> {
    let mut rng = rng::sub_stream(seed, Stream::Tuner, u64::MAX);
    let cols: Vec<Vec<usize>> = space
        .cardinalities()
        .iter()
        .map(|&m| {
            let mut first: Vec<usize> = (0..m).collect();
            first.shuffle(&mut rng);
            let mut col: Vec<usize> = (0..n).map(|i| first[i % m]).collect();
            col.shuffle(&mut rng);
            col
        })
        .collect();
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut rng);
    let (lo, hi) = space.dropout;
    (0..n)
        .map(|i| {
            let u: f64 = rng.random();
            let d = lo + (hi - lo) * (strata[i] as f64 + u) / n as f64;
            TrialConfig::from_indices(space, [cols[0][i], cols[1][i], cols[2][i], cols[3][i]], d.clamp(lo, hi))
        })
        .collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Parzen estimator over one bounded continuous dimension: Gaussians
/// truncated to the range around each observation plus a uniform prior
/// component.
struct Parzen {
    points: Vec<f64>,
    bw: f64,
    lo: f64,
    hi: f64,
}

impl Parzen {
    fn new(points: Vec<f64>, lo: f64, hi: f64) -> Self {
        let range = (hi - lo).max(1e-12);
        let n = points.len().max(1) as f64;
        let spread = if points.len() > 1 { stats::std_dev(&points) } else { range };
        let bw = (1.06 * spread * n.powf(-0.2)).clamp(0.05 * range, range);
        Self { points, bw, lo, hi }
    }

    fn pdf(&self, x: f64) -> f64 {
        let range = (self.hi - self.lo).max(1e-12);
        let mut total = 1.0 / range;
        for &p in &self.points {
            let mass = normal_cdf((self.hi - p) / self.bw) - normal_cdf((self.lo - p) / self.bw);
            let z = (x - p) / self.bw;
            total += (-0.5 * z * z).exp() / (self.bw * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-12));
        }
        total / (self.points.len() + 1) as f64
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let pick = rng.random_range(0..=self.points.len());
        if pick == self.points.len() {
            return rng.random_range(self.lo..=self.hi);
        }
        let centre = self.points[pick];
        for _ in 0..64 {
            let z: f64 = rng.sample(StandardNormal);
            let x = centre + self.bw * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        centre.clamp(self.lo, self.hi)
    }
}

/// Categorical distribution with a +1 prior on every choice.
fn categorical(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum::<usize>() + counts.len();
    counts.iter().map(|&c| (c + 1) as f64 / total as f64).collect()
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The next configuration to evaluate given the trials run so far.
/// Deterministic in `(space, history, seed)`.
pub fn sample_config(space: &SearchSpace, history: &[Trial], seed: u64) -> TrialConfig {
    let n = history.len();
    if n < STARTUP_TRIALS {
        return startup_design(space, STARTUP_TRIALS, seed).swap_remove(n);
    }
    let mut rng = rng::sub_stream(seed, Stream::Tuner, n as u64);
    let mut done: Vec<(f64, &Trial)> = history
        .iter()
        .filter_map(|t| t.objective.filter(|o| o.is_finite()).map(|o| (o, t)))
        .collect();
    if done.is_empty() {
        let (lo, hi) = space.dropout;
        let card = space.cardinalities();
        let idx = card.map(|m| rng.random_range(0..m));
        return TrialConfig::from_indices(space, idx, rng.random_range(lo..=hi));
    }
    done.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.index.cmp(&b.1.index)));
    let objectives: Vec<f64> = done.iter().map(|d| d.0).collect();
    let cut = stats::quantile_sorted(&objectives, GAMMA);
    let n_good = done.iter().take_while(|d| d.0 <= cut).count().max(1);
    let (good, bad) = done.split_at(n_good);

    let card = space.cardinalities();
    let counts = |set: &[(f64, &Trial)], dim: usize| {
        let mut c = vec![0usize; card[dim]];
        for (_, t) in set {
            c[t.config.indices(space)[dim]] += 1;
        }
        c
    };
    let good_cat: Vec<Vec<f64>> = (0..4).map(|d| categorical(&counts(good, d))).collect();
    let bad_cat: Vec<Vec<f64>> = (0..4).map(|d| categorical(&counts(bad, d))).collect();
    let (lo, hi) = space.dropout;
    let good_kde = Parzen::new(good.iter().map(|(_, t)| t.config.dropout_rate).collect(), lo, hi);
    let bad_kde = Parzen::new(bad.iter().map(|(_, t)| t.config.dropout_rate).collect(), lo, hi);

    let mut best: Option<(f64, TrialConfig)> = None;
    for _ in 0..CANDIDATES {
        let idx: [usize; 4] = std::array::from_fn(|d| draw(&good_cat[d], &mut rng));
        let dropout = if hi > lo { good_kde.sample(&mut rng) } else { lo };
        let mut score: f64 = (0..4).map(|d| (good_cat[d][idx[d]] / bad_cat[d][idx[d]]).ln()).sum();
        if hi > lo {
            score += (good_kde.pdf(dropout) / bad_kde.pdf(dropout)).ln();
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, TrialConfig::from_indices(space, idx, dropout)));
        }
    }
    best.expect("at least one candidate").1
}

/// Runs `n_trials` evaluations of `objective`, which returns `Ok(None)` for a
/// diverged trial. Other errors abort the search.
pub fn run_search(
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
    mut objective: impl FnMut(usize, &TrialConfig) -> Result<(Option<f64>, Option<usize>, Option<f64>)>,
    mut on_trial: impl FnMut(&Trial) -> Result<()>,
) -> Result<Vec<Trial>> {
    space.validate()?;
    let mut trials: Vec<Trial> = Vec::with_capacity(n_trials);
    for index in 0..n_trials {
        let config = sample_config(space, &trials, seed);
        let start = Instant::now();
        let (objective, best_epoch, test_rmse) = objective(index, &config)?;
        let ok = objective.is_some_and(f64::is_finite);
        let trial = Trial {
            index,
            config,
            objective: objective.filter(|_| ok),
            status: if ok { TrialStatus::Ok } else { TrialStatus::Diverged },
            best_epoch: best_epoch.filter(|_| ok),
            test_rmse: test_rmse.filter(|_| ok),
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_trial(&trial)?;
        trials.push(trial);
    }
    Ok(trials)
}

/// Index of the lowest objective among completed trials (earliest on ties).
pub fn best_trial(trials: &[Trial]) -> Option<usize> {
    trials
        .iter()
        .filter_map(|t| t.objective.map(|o| (o, t.index)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .and_then(|(_, i)| trials.iter().position(|t| t.index == i))
}

/// Running minimum of the objective; diverged trials carry the previous best.
pub fn best_so_far(trials: &[Trial]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trials
        .iter()
        .map(|t| {
            if let Some(o) = t.objective {
                best = best.min(o);
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub n_trials: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            n_trials: DEFAULT_TRIALS,
            seed: 0,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub trials: Vec<Trial>,
    pub best: usize,
    pub best_model: Model,
}

impl TuneResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    pub fn log(&self) -> Result<String> {
        self.trials.iter().map(Trial::to_json_line).collect()
    }
}

/// Fits one model per trial with early stopping and keeps the one with the
/// lowest validation loss. `test`, when given, is evaluated for every
/// completed trial and recorded in the log (never used for selection).
#[allow(clippy::too_many_arguments)]
pub fn tune(
    train: &[SequenceSample],
    val: &[SequenceSample],
    test: Option<&[SequenceSample]>,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    loss: &LossConfig,
    cfg: &TuneConfig,
    on_trial: impl FnMut(&Trial) -> Result<()>,
) -> Result<TuneResult> {
    let mut loss = loss.clone();
    let tau = match loss.tau {
        Some(t) => t,
        None => loss.resolve(&train.iter().map(|s| s.y).collect::<Vec<_>>())?,
    };
    let mut best: Option<(f64, Model)> = None;
    let trials = run_search(
        &cfg.space,
        cfg.n_trials,
        cfg.seed,
        |index, tc| {
            let model_cfg = tc.model_config(base_model);
            model_cfg.validate_search_space()?;
            let model = Model::init(model_cfg, derive_seed(cfg.seed, Stream::Init, index as u64))?;
            let train_cfg = TrainConfig {
                learning_rate: tc.learning_rate,
                seed: derive_seed(cfg.seed, Stream::Shuffle, index as u64),
                ..base_train.clone()
            };
            match fit(model, train, val, &train_cfg, &loss) {
                Ok(out) => {
                    let objective = out.history.best_val_loss;
                    let test_rmse = test.map(|t| evaluate(&out.model, t, tau)).transpose()?.map(|m| m.rmse);
                    if best.as_ref().is_none_or(|(b, _)| objective < *b) {
                        best = Some((objective, out.model));
                    }
                    Ok((Some(objective), Some(out.history.best_epoch), test_rmse))
                }
                Err(Error::Diverged { .. } | Error::NonFiniteGradient { .. }) => Ok((None, None, None)),
                Err(e) => Err(e),
            }
        },
        on_trial,
    )?;
    let best_idx = best_trial(&trials).ok_or(Error::AllTrialsDiverged(trials.len()))?;
    Ok(TuneResult {
        best: best_idx,
        best_model: best.expect("a completed trial").1,
        trials,
    })
}

/// Most frequent configuration among per-fold winners (categoricals by
/// vote, dropout by the median of the winners sharing the modal
/// categoricals). Ties go to the earliest fold.
pub fn modal_config(bests: &[TrialConfig]) -> Option<TrialConfig> {
    let key = |c: &TrialConfig| (c.conv_filters, c.convlstm_filters, c.kernel_size, c.learning_rate.to_bits());
    let mut votes: BTreeMap<(usize, usize, usize, u64), (usize, usize)> = BTreeMap::new();
    for (i, c) in bests.iter().enumerate() {
        votes.entry(key(c)).or_insert((0, i)).0 += 1;
    }
    let (k, _) = votes
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))?;
    let members: Vec<&TrialConfig> = bests.iter().filter(|c| key(c) == k).collect();
    let dropouts: Vec<f64> = members.iter().map(|c| c.dropout_rate).collect();
    Some(TrialConfig {
        dropout_rate: stats::quantile(&dropouts, 0.5)?,
        ..members[0].clone()
    })
}
