use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for each parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// Bias-corrected Adam update. Gradients are checked before anything is
/// modified; a non-finite entry aborts with the parameter's name.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[&str],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: names.get(i).map_or_else(|| format!("#{i}"), |n| n.to_string()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &g), (m, v)) in iter {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut w = one(0.7);
        let mut st = OptimizerState::new([&w]);
        adam_step(&mut [&mut w], &[one(0.0)], &["w"], &mut st, 0.1).unwrap();
        assert_eq!(w.data(), &[0.7]);
        st.m[0] = one(0.2);
        st.v[0] = one(0.3);
        adam_step(&mut [&mut w], &[one(0.0)], &["w"], &mut st, 0.1).unwrap();
        assert_eq!(st.m[0].data(), &[0.9 * 0.2]);
        assert_eq!(st.v[0].data(), &[0.999 * 0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.01, 250.0] {
            let mut w = one(0.0);
            let mut st = OptimizerState::new([&w]);
            adam_step(&mut [&mut w], &[one(g)], &["w"], &mut st, 1e-3).unwrap();
            let u = w.data()[0];
            assert!(u.signum() == -g.signum());
            assert!(u.abs() <= 1e-3 && u.abs() >= 1e-3 * (1.0 - 1e-6));
        }
    }

    #[test]
    fn nan_names_parameter() {
        let mut w = one(1.0);
        let mut st = OptimizerState::new([&w]);
        let err = adam_step(&mut [&mut w], &[one(f64::NAN)], &["dense.bias"], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("dense.bias"));
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }
}
