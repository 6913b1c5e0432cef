//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its parents, so the tape is topologically ordered by construction.
//! [`Tape::backward`] walks it in reverse and add-accumulates gradients.

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryOp, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Scale(Var, f64),
}

#[derive(Clone, Debug)]
struct TapeNode {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node; handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// A differentiable leaf (a trainable parameter or probed input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = tensor::binary(op, self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Binary(op, a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let value = tensor::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            value,
            rg,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = tensor::sigmoid(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = tensor::tanh(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Op::Tanh(x), value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Op::Relu(x), value, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = tensor::global_avg_pool(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), value, rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(Op::Sum(x), value, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.needs(&[x]);
        self.push(Op::Scale(x, factor), value, rg)
    }

    /// Reverse sweep from a scalar node. Gradients of nodes the loss does not
    /// depend on are zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &upstream, &mut grads)?;
            }
            grads[id] = Some(upstream);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros_like(&self.nodes[v.0].value));
        }
        slot.as_mut()
    }

    fn propagate(&self, node: &TapeNode, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let out_shape = node.value.shape();
                let ia = tensor::broadcast_index_map(va.shape(), out_shape);
                let ib = tensor::broadcast_index_map(vb.shape(), out_shape);
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros_like(va);
                    let gd = ga.data_mut();
                    for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                        gd[i] += match op {
                            BinaryOp::Add | BinaryOp::Sub => up.data()[k],
                            BinaryOp::Mul => up.data()[k] * vb.data()[j],
                        };
                    }
                    self.accumulate(grads, a, ga)?;
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros_like(vb);
                    let gd = gb.data_mut();
                    for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                        gd[j] += match op {
                            BinaryOp::Add => up.data()[k],
                            BinaryOp::Sub => -up.data()[k],
                            BinaryOp::Mul => up.data()[k] * va.data()[i],
                        };
                    }
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (vi, vk) = (self.value(input), self.value(kernel));
                // Disjoint mutable borrows of three accumulator slots.
                let mut gi = self.grad_slot(grads, input).map(std::mem::take);
                let mut gk = self.grad_slot(grads, kernel).map(std::mem::take);
                let mut gb = bias
                    .and_then(|b| self.grad_slot(grads, b))
                    .map(std::mem::take);
                tensor::conv2d_backward(vi, vk, up, gi.as_mut(), gk.as_mut(), gb.as_mut())?;
                if let Some(g) = gi {
                    grads[input.0] = Some(g);
                }
                if let Some(g) = gk {
                    grads[kernel.0] = Some(g);
                }
                if let (Some(b), Some(g)) = (bias, gb) {
                    grads[b.0] = Some(g);
                }
            }
            Op::Sigmoid(x) => {
                let g = zip_map(up, &node.value, |u, s| u * s * (1.0 - s));
                self.accumulate(grads, x, g)?;
            }
            Op::Tanh(x) => {
                let g = zip_map(up, &node.value, |u, t| u * (1.0 - t * t));
                self.accumulate(grads, x, g)?;
            }
            Op::Relu(x) => {
                let g = zip_map(up, self.value(x), |u, v| if v > 0.0 { u } else { 0.0 });
                self.accumulate(grads, x, g)?;
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(x);
                let c = up.len();
                let inv = 1.0 / (vx.len() / c) as f64;
                let mut g = Tensor::zeros_like(vx);
                for px in g.data_mut().chunks_exact_mut(c) {
                    for (d, u) in px.iter_mut().zip(up.data()) {
                        *d = u * inv;
                    }
                }
                self.accumulate(grads, x, g)?;
            }
            Op::Sum(x) => {
                let u = up.data()[0];
                let g = Tensor::full(self.value(x).shape().to_vec(), u);
                self.accumulate(grads, x, g)?;
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, x, up.map(|u| u * factor))?;
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// Central-difference gradient of a scalar function with respect to every
/// element of `x`.
pub fn finite_difference(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}
