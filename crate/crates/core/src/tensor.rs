//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// A dense tensor of up to five dimensions stored row-major.
///
/// A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > MAX_RANK {
            return Err(Error::invalid(format!(
                "tensor rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.len() <= MAX_RANK, "tensor rank exceeds {MAX_RANK}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Adds `other * scale` in place. Shapes must match exactly.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Contiguous sub-tensor along the leading axis.
    pub fn slice_outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }
}

/// Element-wise binary ops with right-aligned broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// Output shape of broadcasting `a` against `b`, numpy style: shapes are
/// right-aligned and each pair of extents must be equal or contain a 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into an operand of
/// shape `shape` that broadcasts to it.
pub(crate) fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let m: usize = shape.iter().product();
    if shape == out_shape {
        return (0..n).collect();
    }
    if m == 1 {
        return vec![0; n];
    }
    // Operand shape is a suffix of the output shape: plain modulo.
    if shape.len() <= out_shape.len() && out_shape[out_shape.len() - shape.len()..] == *shape {
        return (0..n).map(|i| i % m).collect();
    }
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(op.name(), &a.shape, &b.shape)?;
    let ia = broadcast_index_map(&a.shape, &shape);
    let ib = broadcast_index_map(&b.shape, &shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| op.apply(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Mul, a, b)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Per-channel spatial mean of an `H×W×C` map.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = dims3("global_avg_pool", x)?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("global_avg_pool needs H, W >= 1"));
    }
    let mut out = vec![0.0; c];
    for px in x.data.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(Tensor::from_vec(out))
}

pub(crate) fn dims3(op: &'static str, x: &Tensor) -> Result<[usize; 3]> {
    match x.shape.as_slice() {
        &[h, w, c] => Ok([h, w, c]),
        other => Err(Error::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![0, 0, 0],
        }),
    }
}

/// Geometry of a stride-1, zero-padded ("same") 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn check(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let [h, w, cin] = dims3("conv2d", input)?;
        let &[k, k2, kcin, cout] = kernel.shape.as_slice() else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.shape.clone(),
                right: kernel.shape.clone(),
            });
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.shape.clone(),
                right: kernel.shape.clone(),
            });
        }
        if let Some(b) = bias {
            if b.shape != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: kernel.shape.clone(),
                    right: b.shape.clone(),
                });
            }
        }
        Ok(Self {
            height: h,
            width: w,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
        })
    }

    /// Visits every (output pixel, kernel tap, input pixel) triple that lies
    /// inside the grid.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.kernel / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        for y in 0..h {
            for x in 0..w {
                let out_px = (y * w + x) as usize;
                for ky in 0..self.kernel as isize {
                    let iy = y + ky - r;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..self.kernel as isize {
                        let ix = x + kx - r;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let tap = (ky * self.kernel as isize + kx) as usize;
                        f(out_px, tap, (iy * w + ix) as usize);
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 cross-correlation: `input` is `H×W×Cin`, `kernel`
/// is `k×k×Cin×Cout`, result is `H×W×Cout`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = ConvGeometry::check(input, kernel, bias)?;
    let (cin, cout) = (g.in_channels, g.out_channels);
    let mut out = vec![0.0; g.height * g.width * cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(&b.data);
        }
    }
    let (inp, ker) = (&input.data, &kernel.data);
    g.for_each_tap(|out_px, tap, in_px| {
        let o = &mut out[out_px * cout..(out_px + 1) * cout];
        let xs = &inp[in_px * cin..(in_px + 1) * cin];
        let taps = &ker[tap * cin * cout..(tap + 1) * cin * cout];
        for (&a, row) in xs.iter().zip(taps.chunks_exact(cout)) {
            if a != 0.0 {
                for (ov, kv) in o.iter_mut().zip(row) {
                    *ov += a * kv;
                }
            }
        }
    });
    Tensor::new(vec![g.height, g.width, cout], out)
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
/// Each requested gradient is accumulated into the supplied buffer.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    grad_input: Option<&mut Tensor>,
    grad_kernel: Option<&mut Tensor>,
    grad_bias: Option<&mut Tensor>,
) -> Result<()> {
    let g = ConvGeometry::check(input, kernel, None)?;
    let (cin, cout) = (g.in_channels, g.out_channels);
    if grad_out.shape != [g.height, g.width, cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: vec![g.height, g.width, cout],
            right: grad_out.shape.clone(),
        });
    }
    let go = &grad_out.data;
    if let Some(gb) = grad_bias {
        for px in go.chunks_exact(cout) {
            for (b, v) in gb.data.iter_mut().zip(px) {
                *b += v;
            }
        }
    }
    if let Some(gk) = grad_kernel {
        let inp = &input.data;
        let gk = &mut gk.data;
        g.for_each_tap(|out_px, tap, in_px| {
            let gor = &go[out_px * cout..(out_px + 1) * cout];
            let xs = &inp[in_px * cin..(in_px + 1) * cin];
            let rows = &mut gk[tap * cin * cout..(tap + 1) * cin * cout];
            for (&a, row) in xs.iter().zip(rows.chunks_exact_mut(cout)) {
                if a != 0.0 {
                    for (r, gv) in row.iter_mut().zip(gor) {
                        *r += a * gv;
                    }
                }
            }
        });
    }
    if let Some(gi) = grad_input {
        let ker = &kernel.data;
        let gi = &mut gi.data;
        g.for_each_tap(|out_px, tap, in_px| {
            let gor = &go[out_px * cout..(out_px + 1) * cout];
            let taps = &ker[tap * cin * cout..(tap + 1) * cin * cout];
            let dst = &mut gi[in_px * cin..(in_px + 1) * cin];
            for (d, row) in dst.iter_mut().zip(taps.chunks_exact(cout)) {
                *d += dot(row, gor);
            }
        });
    }
    Ok(())
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}
