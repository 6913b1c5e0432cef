//! Model definition: time-distributed convolution, a single ConvLSTM layer,
//! global average pooling, dropout and a dense head predicting next-day
//! precipitation in `log1p` space.

pub mod checkpoint;
pub mod layers;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub use layers::{ConvFeatureLayer, ConvLstmCell, DenseHead};
use layers::{ConvFeatureVars, ConvLstmVars, DenseVars};

pub const CONV_FILTER_CHOICES: [usize; 3] = [32, 64, 128];
pub const CONVLSTM_FILTER_CHOICES: [usize; 3] = [16, 32, 64];
pub const KERNEL_SIZE_CHOICES: [usize; 2] = [3, 5];
pub const MAX_DROPOUT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_filters: usize,
    pub convlstm_filters: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub features: usize,
    /// Initial value of the forget-gate bias.
    #[serde(default = "default_forget_bias")]
    pub forget_bias: f64,
}

fn default_forget_bias() -> f64 {
    1.0
}

impl ModelConfig {
    /// Default architecture for a `T×H×W×F` input: the smallest capacity in
    /// the search space with 3×3 kernels.
    pub fn for_input(seq_len: usize, height: usize, width: usize, features: usize) -> Self {
        Self {
            conv_filters: 32,
            convlstm_filters: 16,
            kernel_size: 3,
            dropout_rate: 0.2,
            seq_len,
            height,
            width,
            features,
            forget_bias: 1.0,
        }
    }

    /// Structural sanity: positive extents, odd kernel, dropout in range.
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("conv_filters", self.conv_filters),
            ("convlstm_filters", self.convlstm_filters),
            ("seq_len", self.seq_len),
            ("height", self.height),
            ("width", self.width),
            ("features", self.features),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("model {name} must be positive")));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        check_dropout(self.dropout_rate)
    }

    /// Checks the configuration lies inside the tunable search space.
    pub fn validate_search_space(&self) -> Result<()> {
        self.validate()?;
        if !CONV_FILTER_CHOICES.contains(&self.conv_filters) {
            return Err(Error::invalid(format!(
                "conv_filters {} not in {CONV_FILTER_CHOICES:?}",
                self.conv_filters
            )));
        }
        if !CONVLSTM_FILTER_CHOICES.contains(&self.convlstm_filters) {
            return Err(Error::invalid(format!(
                "convlstm_filters {} not in {CONVLSTM_FILTER_CHOICES:?}",
                self.convlstm_filters
            )));
        }
        if !KERNEL_SIZE_CHOICES.contains(&self.kernel_size) {
            return Err(Error::invalid(format!(
                "kernel_size {} not in {KERNEL_SIZE_CHOICES:?}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.seq_len, self.height, self.width, self.features]
    }
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..=MAX_DROPOUT).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate {rate} outside [0, {MAX_DROPOUT}]"
        )));
    }
    Ok(())
}

/// Anything that maps one `T×H×W×F` input cube to a `log1p`-space
/// precipitation estimate.
pub trait Regressor: Sync {
    fn predict_log(&self, x: &Tensor) -> Result<f64>;

    fn predict_many(&self, xs: &[&Tensor]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        xs.par_iter().map(|x| self.predict_log(x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub conv: ConvFeatureLayer,
    pub cell: ConvLstmCell,
    pub head: DenseHead,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Parameter leaves in [`Model::PARAM_NAMES`] order.
    pub params: Vec<Var>,
    /// `F_t` for every step.
    pub features: Vec<Var>,
    /// `H_t` for every step; the last entry is `H_T`.
    pub hidden: Vec<Var>,
    pub cells: Vec<Var>,
    pub pooled: Var,
    pub prediction: Var,
}

impl ForwardTrace {
    pub fn hidden_final(&self) -> Var {
        *self.hidden.last().expect("at least one step")
    }
}

struct ModelVars {
    conv: ConvFeatureVars,
    cell: ConvLstmVars,
    head: DenseVars,
}

impl ModelVars {
    fn register(model: &Model, tape: &mut Tape, trainable: bool) -> Self {
        Self {
            conv: ConvFeatureVars::register(&model.conv, tape, trainable),
            cell: ConvLstmVars::register(&model.cell, tape, trainable),
            head: DenseVars::register(&model.head, tape, trainable),
        }
    }

    fn list(&self) -> Vec<Var> {
        let c = &self.cell;
        vec![
            self.conv.kernel,
            self.conv.bias,
            c.w_xi,
            c.w_hi,
            c.w_xf,
            c.w_hf,
            c.w_xo,
            c.w_ho,
            c.w_xc,
            c.w_hc,
            c.b_i,
            c.b_f,
            c.b_o,
            c.b_c,
            self.head.weight,
            self.head.bias,
        ]
    }
}

impl Model {
    pub const PARAM_NAMES: [&'static str; 16] = [
        "conv.kernel",
        "conv.bias",
        "convlstm.w_xi",
        "convlstm.w_hi",
        "convlstm.w_xf",
        "convlstm.w_hf",
        "convlstm.w_xo",
        "convlstm.w_ho",
        "convlstm.w_xc",
        "convlstm.w_hc",
        "convlstm.b_i",
        "convlstm.b_f",
        "convlstm.b_o",
        "convlstm.b_c",
        "dense.weight",
        "dense.bias",
    ];

    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        Ok(Self {
            conv: ConvFeatureLayer::zeros(k, config.features, config.conv_filters),
            cell: ConvLstmCell::zeros(k, config.conv_filters, config.convlstm_filters),
            head: DenseHead::zeros(config.convlstm_filters),
            config,
        })
    }

    /// Glorot-uniform kernels, zero biases except the forget gate bias which
    /// starts at `config.forget_bias`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = rng::stream(seed, Stream::Init);
        let forget_bias = model.config.forget_bias;
        for (name, t) in Self::PARAM_NAMES.into_iter().zip(model.params_mut()) {
            if name.contains(".b") {
                if name == "convlstm.b_f" {
                    t.data_mut().fill(forget_bias);
                }
                continue;
            }
            let (fan_in, fan_out) = fans(t.shape());
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn params(&self) -> [&Tensor; 16] {
        let c = &self.cell;
        [
            &self.conv.kernel,
            &self.conv.bias,
            &c.w_xi,
            &c.w_hi,
            &c.w_xf,
            &c.w_hf,
            &c.w_xo,
            &c.w_ho,
            &c.w_xc,
            &c.w_hc,
            &c.b_i,
            &c.b_f,
            &c.b_o,
            &c.b_c,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 16] {
        let c = &mut self.cell;
        [
            &mut self.conv.kernel,
            &mut self.conv.bias,
            &mut c.w_xi,
            &mut c.w_hi,
            &mut c.w_xf,
            &mut c.w_hf,
            &mut c.w_xo,
            &mut c.w_ho,
            &mut c.w_xc,
            &mut c.w_hc,
            &mut c.b_i,
            &mut c.b_f,
            &mut c.b_o,
            &mut c.b_c,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.config.input_shape();
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: expected.to_vec(),
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records a full forward pass of one `T×H×W×F` cube on `tape`.
    ///
    /// `dropout_mask`, when given, multiplies the pooled vector (training
    /// mode); see [`dropout_mask`].
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        trainable: bool,
        dropout_mask: Option<&Tensor>,
    ) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let vars = ModelVars::register(self, tape, trainable);
        let steps = self.config.seq_len;
        let (mut features, mut hidden, mut cells) =
            (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
        let mut state = None;
        for t in 0..steps {
            let x_t = tape.constant(x.slice_outer(t));
            let f_t = vars.conv.forward(tape, x_t)?;
            let (h, c) = vars.cell.step(tape, f_t, state)?;
            features.push(f_t);
            hidden.push(h);
            cells.push(c);
            state = Some((h, c));
        }
        let h_last = *hidden.last().expect("seq_len >= 1");
        let mut pooled = tape.global_avg_pool(h_last)?;
        if let Some(mask) = dropout_mask {
            let m = tape.constant(mask.clone());
            pooled = tape.mul(pooled, m)?;
        }
        let prediction = vars.head.forward(tape, pooled)?;
        Ok(ForwardTrace {
            params: vars.list(),
            features,
            hidden,
            cells,
            pooled,
            prediction,
        })
    }

    /// Runs the recurrence over an arbitrary number of steps starting from
    /// `state` (zero state when `None`) and returns the final `(H, C)`.
    pub fn encode(&self, steps: &Tensor, state: Option<(&Tensor, &Tensor)>) -> Result<(Tensor, Tensor)> {
        let s = steps.shape();
        if s.len() != 4 || s[1..] != [self.config.height, self.config.width, self.config.features] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![0, self.config.height, self.config.width, self.config.features],
                right: s.to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = ModelVars::register(self, &mut tape, false);
        let mut cur = state.map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())));
        for t in 0..s[0] {
            let x_t = tape.constant(steps.slice_outer(t));
            let f_t = vars.conv.forward(&mut tape, x_t)?;
            cur = Some(vars.cell.step(&mut tape, f_t, cur)?);
        }
        let (h, c) = cur.ok_or_else(|| Error::invalid("encode needs at least one step"))?;
        Ok((tape.value(h).clone(), tape.value(c).clone()))
    }

    /// Prediction in `log1p` space.
    pub fn forward(&self, x: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let trace = self.forward_taped(&mut tape, x, false, None)?;
        Ok(tape.value(trace.prediction).data()[0])
    }
}

impl Regressor for Model {
    fn predict_log(&self, x: &Tensor) -> Result<f64> {
        self.forward(x)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [k1, k2, cin, cout] => (k1 * k2 * cin, k1 * k2 * cout),
        [n] => (n, 1),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1/(1−rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    check_dropout(rate)?;
    if rate == 0.0 {
        return Ok(Tensor::ones(vec![len]));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_vec(data))
}

/// Applies inverted dropout in training mode; identity in evaluation mode.
pub fn apply_dropout(h: &Tensor, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    check_dropout(rate)?;
    if !training || rate == 0.0 {
        return Ok(h.clone());
    }
    let mask = dropout_mask(h.len(), rate, rng)?;
    let data = h.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::new(h.shape().to_vec(), data)
}
