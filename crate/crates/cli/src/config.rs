//! Flat `key=value` run configuration with defaults, file overlays and
//! `--set` overrides. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use nowcast_core::data::bundle::PipelineConfig;
use nowcast_core::data::manifest::{split_list, KeyValues};
use nowcast_core::data::synthetic::parse_lags;
use nowcast_core::hyperopt::{SearchSpace, TuneConfig};
use nowcast_core::train::{LossConfig, TrainConfig};
use nowcast_core::ModelConfig;

pub const CONFIG_FILE: &str = "config.txt";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.seq_len", "7"),
    ("data.lags", "1,2,3"),
    ("data.split", "0.7,0.15,0.15"),
    ("model.conv_filters", "32"),
    ("model.convlstm_filters", "16"),
    ("model.kernel_size", "3"),
    ("model.dropout", "0.2"),
    ("model.forget_bias", "1"),
    ("train.epochs", "30"),
    ("train.early_stop_patience", "3"),
    ("train.plateau_factor", "0.5"),
    ("train.plateau_patience", "2"),
    ("train.min_delta", "0.000001"),
    ("train.batch_size", "16"),
    ("train.learning_rate", "0.001"),
    ("train.init_output_bias", "true"),
    ("loss.tau_percentile", "90"),
    ("loss.alpha", "5"),
    ("cv.enabled", "false"),
    ("cv.folds", "3"),
    ("tune.trials", "20"),
    ("tune.per_fold", "false"),
    ("tune.conv_filters", "32,64,128"),
    ("tune.convlstm_filters", "16,32,64"),
    ("tune.kernel_sizes", "3,5"),
    ("tune.learning_rates", "0.001,0.0001"),
    ("tune.dropout_min", "0"),
    ("tune.dropout_max", "0.5"),
    ("xai.methods", "permutation,occlusion,gradcam,counterfactual"),
    ("xai.partition", "test"),
    ("xai.repeats", "5"),
    ("xai.delta", "0.1"),
    ("xai.decile", "0.1"),
    ("xai.counterfactual_space", "native"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .expect("known configuration key")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| anyhow!("unknown configuration key `{key}`"))?;
        slot.1 = value.trim().to_string();
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let kv = KeyValues::parse(text, origin)?;
        for (line, key, value) in kv.into_entries() {
            self.set(&key, &value)
                .with_context(|| format!("{}:{line}", origin.display()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text, path)
    }

    /// `key=value` strings as given to `--set`.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got `{s}`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| anyhow!("{key}={v}: {e}"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        split_list(self.get(key))
            .iter()
            .map(|v| v.parse().map_err(|e| anyhow!("{key}: `{v}`: {e}")))
            .collect()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let split: Vec<f64> = self.list("data.split")?;
        let fractions: [f64; 3] = split
            .try_into()
            .map_err(|_| anyhow!("data.split needs three fractions"))?;
        let seed: u64 = self.parsed("seed")?;
        let pipeline = PipelineConfig {
            seq_len: self.parsed("data.seq_len")?,
            lags: parse_lags(self.get("data.lags"))?,
            fractions,
        };
        let model = ModelSettings {
            conv_filters: self.parsed("model.conv_filters")?,
            convlstm_filters: self.parsed("model.convlstm_filters")?,
            kernel_size: self.parsed("model.kernel_size")?,
            dropout_rate: self.parsed("model.dropout")?,
            forget_bias: self.parsed("model.forget_bias")?,
        };
        let train = TrainConfig {
            epochs: self.parsed("train.epochs")?,
            early_stop_patience: self.parsed("train.early_stop_patience")?,
            plateau_factor: self.parsed("train.plateau_factor")?,
            plateau_patience: self.parsed("train.plateau_patience")?,
            min_delta: self.parsed("train.min_delta")?,
            batch_size: self.parsed("train.batch_size")?,
            learning_rate: self.parsed("train.learning_rate")?,
            init_output_bias: self.parsed("train.init_output_bias")?,
            seed,
        };
        train.validate()?;
        let loss = LossConfig {
            tau_percentile: self.parsed("loss.tau_percentile")?,
            alpha: self.parsed("loss.alpha")?,
            tau: None,
        };
        loss.validate()?;
        let space = SearchSpace {
            conv_filters: self.list("tune.conv_filters")?,
            convlstm_filters: self.list("tune.convlstm_filters")?,
            kernel_sizes: self.list("tune.kernel_sizes")?,
            learning_rates: self.list("tune.learning_rates")?,
            dropout: (self.parsed("tune.dropout_min")?, self.parsed("tune.dropout_max")?),
        };
        space.validate()?;
        let methods = self
            .list::<String>("xai.methods")?
            .iter()
            .map(|m| m.parse())
            .collect::<Result<Vec<Method>>>()?;
        let xai = XaiSettings {
            methods,
            partition: self.parsed("xai.partition")?,
            repeats: self.parsed("xai.repeats")?,
            delta: self.parsed("xai.delta")?,
            decile: self.parsed("xai.decile")?,
            native_counterfactual: match self.get("xai.counterfactual_space") {
                "native" => true,
                "model_input" => false,
                other => bail!("xai.counterfactual_space must be native or model_input, got `{other}`"),
            },
        };
        Ok(Resolved {
            seed,
            pipeline,
            model,
            train,
            loss,
            cv_enabled: self.parsed("cv.enabled")?,
            cv_folds: self.parsed("cv.folds")?,
            tune: TuneConfig {
                n_trials: self.parsed("tune.trials")?,
                seed,
                space,
            },
            tune_per_fold: self.parsed("tune.per_fold")?,
            xai,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub conv_filters: usize,
    pub convlstm_filters: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub forget_bias: f64,
}

impl ModelSettings {
    pub fn model_config(&self, seq_len: usize, height: usize, width: usize, features: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            conv_filters: self.conv_filters,
            convlstm_filters: self.convlstm_filters,
            kernel_size: self.kernel_size,
            dropout_rate: self.dropout_rate,
            forget_bias: self.forget_bias,
            ..ModelConfig::for_input(seq_len, height, width, features)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Permutation,
    Occlusion,
    GradCam,
    Counterfactual,
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "permutation" => Self::Permutation,
            "occlusion" => Self::Occlusion,
            "gradcam" => Self::GradCam,
            "counterfactual" => Self::Counterfactual,
            _ => bail!("unknown explanation method `{s}` (permutation, occlusion, gradcam, counterfactual)"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl FromStr for Partition {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Self::Train,
            "val" => Self::Val,
            "test" => Self::Test,
            _ => bail!("partition must be train, val or test, got `{s}`"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XaiSettings {
    pub methods: Vec<Method>,
    pub partition: Partition,
    pub repeats: usize,
    pub delta: f64,
    pub decile: f64,
    pub native_counterfactual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub cv_enabled: bool,
    pub cv_folds: usize,
    pub tune: TuneConfig,
    pub tune_per_fold: bool,
    pub xai: XaiSettings,
}
