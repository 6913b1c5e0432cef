//! The three trainable blocks: a time-shared convolutional feature extractor,
//! a ConvLSTM cell and a dense regression head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `F_t = ReLU(W_c * X_t + b_c)`, applied with the same weights at every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvFeatureLayer {
    /// `k×k×F×C_out`
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvFeatureLayer {
    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: Tensor::zeros(vec![kernel_size, kernel_size, in_channels, out_channels]),
            bias: Tensor::zeros(vec![out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }

    /// Spatial feature map of one time step.
    pub fn forward(&self, x_t: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ConvFeatureVars::register(self, &mut tape, false);
        let x = tape.constant(x_t.clone());
        let f = vars.forward(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvFeatureVars {
    pub kernel: Var,
    pub bias: Var,
}

impl ConvFeatureVars {
    pub fn register(layer: &ConvFeatureLayer, tape: &mut Tape, trainable: bool) -> Self {
        let leaf = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            kernel: leaf(tape, &layer.kernel),
            bias: leaf(tape, &layer.bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x_t: Var) -> Result<Var> {
        let z = tape.conv2d(x_t, self.kernel, Some(self.bias))?;
        Ok(tape.relu(z))
    }
}

/// Convolutional LSTM cell. Input kernels are `k×k×C_in×C_h`, recurrent
/// kernels `k×k×C_h×C_h`, biases `C_h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmCell {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

impl ConvLstmCell {
    pub fn zeros(kernel_size: usize, in_channels: usize, hidden: usize) -> Self {
        let wx = || Tensor::zeros(vec![kernel_size, kernel_size, in_channels, hidden]);
        let wh = || Tensor::zeros(vec![kernel_size, kernel_size, hidden, hidden]);
        let b = || Tensor::zeros(vec![hidden]);
        Self {
            w_xi: wx(),
            w_hi: wh(),
            w_xf: wx(),
            w_hf: wh(),
            w_xo: wx(),
            w_ho: wh(),
            w_xc: wx(),
            w_hc: wh(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_c: b(),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.b_i.len()
    }

    /// One recurrence step on explicit state tensors.
    pub fn step(&self, f_t: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        if h_prev.shape() != c_prev.shape() {
            return Err(Error::ShapeMismatch {
                op: "convlstm_step state",
                left: h_prev.shape().to_vec(),
                right: c_prev.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = ConvLstmVars::register(self, &mut tape, false);
        let f = tape.constant(f_t.clone());
        let h = tape.constant(h_prev.clone());
        let c = tape.constant(c_prev.clone());
        let (h, c) = vars.step(&mut tape, f, Some((h, c)))?;
        Ok((tape.value(h).clone(), tape.value(c).clone()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLstmVars {
    pub w_xi: Var,
    pub w_hi: Var,
    pub w_xf: Var,
    pub w_hf: Var,
    pub w_xo: Var,
    pub w_ho: Var,
    pub w_xc: Var,
    pub w_hc: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_o: Var,
    pub b_c: Var,
}

impl ConvLstmVars {
    pub fn register(cell: &ConvLstmCell, tape: &mut Tape, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            w_xi: leaf(&cell.w_xi),
            w_hi: leaf(&cell.w_hi),
            w_xf: leaf(&cell.w_xf),
            w_hf: leaf(&cell.w_hf),
            w_xo: leaf(&cell.w_xo),
            w_ho: leaf(&cell.w_ho),
            w_xc: leaf(&cell.w_xc),
            w_hc: leaf(&cell.w_hc),
            b_i: leaf(&cell.b_i),
            b_f: leaf(&cell.b_f),
            b_o: leaf(&cell.b_o),
            b_c: leaf(&cell.b_c),
        }
    }

    /// `W_x * F_t + W_h * H_{t-1} + b`. A missing previous state is the zero
    /// state, whose convolution vanishes.
    fn pre_activation(
        &self,
        tape: &mut Tape,
        f_t: Var,
        h_prev: Option<Var>,
        w_x: Var,
        w_h: Var,
        b: Var,
    ) -> Result<Var> {
        let x_part = tape.conv2d(f_t, w_x, Some(b))?;
        match h_prev {
            Some(h) => {
                let h_part = tape.conv2d(h, w_h, None)?;
                tape.add(x_part, h_part)
            }
            None => Ok(x_part),
        }
    }

    /// Gate equations in order: input, forget, output gates, then cell and
    /// hidden state. Returns `(H_t, C_t)`.
    pub fn step(&self, tape: &mut Tape, f_t: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let h_prev = state.map(|s| s.0);
        let z_i = self.pre_activation(tape, f_t, h_prev, self.w_xi, self.w_hi, self.b_i)?;
        let i_t = tape.sigmoid(z_i);
        let z_f = self.pre_activation(tape, f_t, h_prev, self.w_xf, self.w_hf, self.b_f)?;
        let f_gate = tape.sigmoid(z_f);
        let z_o = self.pre_activation(tape, f_t, h_prev, self.w_xo, self.w_ho, self.b_o)?;
        let o_t = tape.sigmoid(z_o);
        let z_c = self.pre_activation(tape, f_t, h_prev, self.w_xc, self.w_hc, self.b_c)?;
        let g_t = tape.tanh(z_c);

        let write = tape.mul(i_t, g_t)?;
        let c_t = match state {
            Some((_, c_prev)) => {
                let keep = tape.mul(f_gate, c_prev)?;
                tape.add(keep, write)?
            }
            None => write,
        };
        let squashed = tape.tanh(c_t);
        let h_t = tape.mul(o_t, squashed)?;
        Ok((h_t, c_t))
    }
}

/// `ŷ = W_d · G(H_T) + b_d`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    pub weight: Tensor,
    /// Shape `[1]`.
    pub bias: Tensor,
}

impl DenseHead {
    pub fn zeros(inputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![inputs]),
            bias: Tensor::zeros(vec![1]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    pub fn register(head: &DenseHead, tape: &mut Tape, trainable: bool) -> Self {
        if trainable {
            Self {
                weight: tape.param(head.weight.clone()),
                bias: tape.param(head.bias.clone()),
            }
        } else {
            Self {
                weight: tape.constant(head.weight.clone()),
                bias: tape.constant(head.bias.clone()),
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let prod = tape.mul(pooled, self.weight)?;
        let dot = tape.sum(prod);
        tape.add(dot, self.bias)
    }
}
