//! Dense 64-bit tensors with a reverse-mode autodiff tape.
//!
//! The tape records every operation in execution order; [`Tape::backward`]
//! walks it once in reverse. Layouts are row-major. Convolutions work along
//! the frequency axis of `[frames, bins, channels]` tensors with weights laid
//! out as `[kernel, c_in, c_out]`, so a kernel-1 convolution is the same
//! product as a matmul over the flattened `[frames * bins, channels]` rows.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("non-finite function value {0}")]
    NonFinite(f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadEpsilon(f64),
}

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadData {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    fn last(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            pad: (kernel - 1) / 2,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv1d(Var, Var, ConvSpec),
    ConvTranspose1d(Var, Var, ConvSpec),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast(Var, usize, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out_len(bins: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = bins + 2 * spec.pad;
    if padded < kernel || spec.stride == 0 {
        None
    } else {
        Some((padded - kernel) / spec.stride + 1)
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, [k, 1], &tb.data, [n, 1], &mut out, 0.0);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(b));
        if tb.shape.len() != 1 || tx.last() != tb.shape[0] || tx.shape.is_empty() {
            return Err(mismatch("add_bias", tx, tb));
        }
        let n = tb.shape[0];
        let mut data = tx.data.clone();
        for row in data.chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&tb.data) {
                *v += bb;
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::AddBias(x, b), &[x, b]))
    }

    /// Frequency-axis convolution: `x [N, F, Cin]`, `w [K, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        if tx.shape.len() != 3 || tw.shape.len() != 3 || tx.shape[2] != tw.shape[1] {
            return Err(mismatch("conv1d", tx, tw));
        }
        let (n, f, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (k, cout) = (tw.shape[0], tw.shape[2]);
        let fo = conv_out_len(f, k, spec).ok_or_else(|| mismatch("conv1d", tx, tw))?;
        let mut out = vec![0.0; n * fo * cout];
        conv1d_forward(&tx.data, &tw.data, &mut out, n, f, cin, k, cout, fo, spec);
        let t = Tensor {
            shape: vec![n, fo, cout],
            data: out,
        };
        Ok(self.push(t, Op::Conv1d(x, w, spec), &[x, w]))
    }

    /// Transposed frequency-axis convolution producing `F * stride` bins.
    /// Input bin `q` scatters through tap `j` to output bin `q * stride + j - pad`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        if tx.shape.len() != 3 || tw.shape.len() != 3 || tx.shape[2] != tw.shape[1] || spec.stride == 0
        {
            return Err(mismatch("conv_transpose1d", tx, tw));
        }
        let (n, f, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (k, cout) = (tw.shape[0], tw.shape[2]);
        let fo = f * spec.stride;
        let mut out = vec![0.0; n * fo * cout];
        conv_t_forward(&tx.data, &tw.data, &mut out, n, f, cin, k, cout, fo, spec);
        let t = Tensor {
            shape: vec![n, fo, cout],
            data: out,
        };
        Ok(self.push(t, Op::ConvTranspose1d(x, w, spec), &[x, w]))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape {
            return Err(mismatch(name, ta, tb));
        }
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn map_op(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.val(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_op(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.val(xs[0]);
        let lead = &first.shape[..first.shape.len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &v in xs {
            let t = self.val(v);
            if t.shape.len() != first.shape.len() || &t.shape[..t.shape.len() - 1] != lead {
                return Err(mismatch("concat_last", first, t));
            }
            width += t.last();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &v in xs {
                let t = self.val(v);
                let c = t.last();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::ConcatLast(xs.to_vec()), xs))
    }

    /// Stacks along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.val(xs[0]);
        let tail = first.shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.val(v);
            if t.shape[1..] != tail[..] {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Keeps `[start, end)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let c = tx.last();
        if start >= end || end > c || tx.shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_last",
                left: tx.shape.clone(),
                right: vec![start, end],
            });
        }
        let data: Vec<f64> = tx
            .data
            .chunks_exact(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = end - start;
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::SliceLast(x, start, end), &[x]))
    }

    /// Keeps rows `[start, end)` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        if start >= end || end > tx.rows() || tx.shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                left: tx.shape.clone(),
                right: vec![start, end],
            });
        }
        let rl = tx.row_len();
        let data = tx.data[start * rl..end * rl].to_vec();
        let mut shape = tx.shape.clone();
        shape[0] = end - start;
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::SliceRows(x, start), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.val(pred), self.val(target));
        if tp.shape != tt.shape || tp.data.is_empty() {
            return Err(mismatch("mse", tp, tt));
        }
        let s: f64 = tp
            .data
            .iter()
            .zip(&tt.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / tp.data.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), &[pred, target]))
    }

    /// Reverse pass from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let shape = self.val(loss).shape.clone();
        if self.val(loss).data.len() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape,
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data.iter_mut().zip(&g.data) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// The gradient buffer of `v`, zero-initialized on first use, for ops
    /// that only touch part of their input.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.val(v).shape)))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let like = |v: Var, data: Vec<f64>| Tensor {
            shape: self.val(v).shape.clone(),
            data,
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.needs(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, [n, 1], &tb.data, [1, n], &mut da, 0.0);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, [1, k], &g.data, [n, 1], &mut db, 0.0);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*b) {
                    let n = self.val(*b).data.len();
                    let mut db = vec![0.0; n];
                    for row in g.data.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
                self.accumulate(grads, *x, like(*x, g.data.clone()));
            }
            Op::Conv1d(x, w, spec) => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (n, f, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (k, cout) = (tw.shape[0], tw.shape[2]);
                let fo = out.shape[1];
                let width = k * cin;
                let (need_x, need_w) = (self.needs(*x), self.needs(*w));
                let mut dx = vec![0.0; if need_x { tx.data.len() } else { 0 }];
                let mut dw = vec![0.0; if need_w { tw.data.len() } else { 0 }];
                for (s0, s1) in sample_chunks(n, fo * width.max(cout)) {
                    let rows = (s1 - s0) * fo;
                    let xs = &tx.data[s0 * f * cin..s1 * f * cin];
                    let gs = &g.data[s0 * fo * cout..s1 * fo * cout];
                    if need_w {
                        let cols = im2col(xs, s1 - s0, f, cin, k, fo, *spec);
                        gemm(width, rows, cout, &cols, [1, width], gs, [cout, 1], &mut dw, 1.0);
                    }
                    if need_x {
                        let mut dcols = vec![0.0; rows * width];
                        gemm(rows, cout, width, gs, [cout, 1], &tw.data, [1, cout], &mut dcols, 0.0);
                        let dxs = &mut dx[s0 * f * cin..s1 * f * cin];
                        col2im_add(&dcols, dxs, s1 - s0, f, cin, k, fo, *spec);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if need_w {
                    self.accumulate(grads, *w, like(*w, dw));
                }
            }
            Op::ConvTranspose1d(x, w, spec) => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (n, f, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (k, cout) = (tw.shape[0], tw.shape[2]);
                let fo = out.shape[1];
                let width = k * cout;
                let wt = taps_by_input(&tw.data, k, cin, cout);
                let (need_x, need_w) = (self.needs(*x), self.needs(*w));
                let mut dx = vec![0.0; if need_x { tx.data.len() } else { 0 }];
                let mut dwt = vec![0.0; if need_w { cin * width } else { 0 }];
                for (s0, s1) in sample_chunks(n, f * width) {
                    let rows = (s1 - s0) * f;
                    // dcols[(s, q), (j, co)] = G[(s, q * stride + j - pad), co]
                    let mut dcols = vec![0.0; rows * width];
                    for s in s0..s1 {
                        for q in 0..f {
                            let r = (s - s0) * f + q;
                            let drow = &mut dcols[r * width..(r + 1) * width];
                            for j in 0..k {
                                if let Some(p) = tap_index(q, j, *spec, fo) {
                                    let go = &g.data[(s * fo + p) * cout..(s * fo + p + 1) * cout];
                                    drow[j * cout..(j + 1) * cout].copy_from_slice(go);
                                }
                            }
                        }
                    }
                    if need_x {
                        let dxs = &mut dx[s0 * f * cin..s1 * f * cin];
                        gemm(rows, width, cin, &dcols, [width, 1], &wt, [1, width], dxs, 0.0);
                    }
                    if need_w {
                        let xs = &tx.data[s0 * f * cin..s1 * f * cin];
                        gemm(cin, rows, width, xs, [1, cin], &dcols, [width, 1], &mut dwt, 1.0);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if need_w {
                    let mut dw = vec![0.0; tw.data.len()];
                    for ci in 0..cin {
                        for j in 0..k {
                            dw[(j * cin + ci) * cout..(j * cin + ci + 1) * cout]
                                .copy_from_slice(&dwt[ci * width + j * cout..ci * width + (j + 1) * cout]);
                        }
                    }
                    self.accumulate(grads, *w, like(*w, dw));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = g.data.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let d = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.needs(*b) {
                    let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale(x, c) => {
                let d = g.data.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Tanh(x) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Relu(x) => {
                let tx = self.val(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::ConcatLast(xs) => {
                let width = out.last();
                let rows = out.data.len() / width.max(1);
                let mut offset = 0;
                for &v in xs {
                    let c = self.val(v).last();
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data[r * width + offset..r * width + offset + c]);
                        }
                        self.accumulate(grads, v, like(v, d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.val(v).data.len();
                    if self.needs(v) {
                        self.accumulate(grads, v, like(v, g.data[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::SliceLast(x, start, end) => {
                let c = self.val(*x).last();
                let w = end - start;
                if let Some(d) = self.grad_slot(grads, *x) {
                    for (r, row) in g.data.chunks_exact(w).enumerate() {
                        for (e, v) in d.data[r * c + start..r * c + end].iter_mut().zip(row) {
                            *e += v;
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let rl = self.val(*x).row_len();
                if let Some(d) = self.grad_slot(grads, *x) {
                    for (e, v) in d.data[start * rl..start * rl + g.data.len()].iter_mut().zip(&g.data) {
                        *e += v;
                    }
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, like(*x, g.data.clone()));
            }
            Op::Sum(x) => {
                let n = self.val(*x).data.len();
                self.accumulate(grads, *x, like(*x, vec![g.data[0]; n]));
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.val(*p), self.val(*t));
                let scale = 2.0 * g.data[0] / tp.data.len() as f64;
                let diff: Vec<f64> = tp.data.iter().zip(&tt.data).map(|(a, b)| scale * (a - b)).collect();
                if self.needs(*t) {
                    self.accumulate(grads, *t, like(*t, diff.iter().map(|v| -v).collect()));
                }
                self.accumulate(grads, *p, like(*p, diff));
            }
        }
    }
}

/// `c = beta * c + a b` for an `[m, k]` by `[k, n]` product; `a` and `b`
/// are addressed through `[row, column]` strides, `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: [usize; 2], b: &[f64], sb: [usize; 2], c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |s: [usize; 2], r: usize, col: usize| (r - 1) * s[0] + (col - 1) * s[1];
    assert!(k == 0 || (last(sa, m, k) < a.len() && last(sb, k, n) < b.len()));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access of `a`, `b` and `c` in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output bin fed by input bin `q` through tap `j` of a transposed conv.
#[inline]
fn tap_index(q: usize, j: usize, spec: ConvSpec, fo: usize) -> Option<usize> {
    let p = (q * spec.stride + j) as isize - spec.pad as isize;
    (p >= 0 && (p as usize) < fo).then_some(p as usize)
}

/// Input bin read by output bin `p` through tap `j` of a conv.
#[inline]
fn src_index(p: usize, j: usize, spec: ConvSpec, f: usize) -> Option<usize> {
    let q = (p * spec.stride + j) as isize - spec.pad as isize;
    (q >= 0 && (q as usize) < f).then_some(q as usize)
}

/// `[n * fo, k * cin]` patch matrix of a `[n, f, cin]` input.
fn im2col(x: &[f64], n: usize, f: usize, cin: usize, k: usize, fo: usize, spec: ConvSpec) -> Vec<f64> {
    let width = k * cin;
    let mut cols = vec![0.0; n * fo * width];
    for s in 0..n {
        for p in 0..fo {
            let row = &mut cols[(s * fo + p) * width..(s * fo + p + 1) * width];
            for j in 0..k {
                if let Some(q) = src_index(p, j, spec, f) {
                    row[j * cin..(j + 1) * cin].copy_from_slice(&x[(s * f + q) * cin..(s * f + q + 1) * cin]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], dx: &mut [f64], n: usize, f: usize, cin: usize, k: usize, fo: usize, spec: ConvSpec) {
    let width = k * cin;
    for s in 0..n {
        for p in 0..fo {
            let row = &cols[(s * fo + p) * width..(s * fo + p + 1) * width];
            for j in 0..k {
                if let Some(q) = src_index(p, j, spec, f) {
                    for (d, v) in dx[(s * f + q) * cin..(s * f + q + 1) * cin].iter_mut().zip(&row[j * cin..]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Rearranges `[k, cin, cout]` weights to `[cin, k * cout]`.
fn taps_by_input(w: &[f64], k: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for j in 0..k {
        for ci in 0..cin {
            wt[ci * k * cout + j * cout..ci * k * cout + (j + 1) * cout]
                .copy_from_slice(&w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout]);
        }
    }
    wt
}

/// Splits `n` samples into runs whose scratch rows (`per_sample` values
/// each) stay around a cache-sized block.
fn sample_chunks(n: usize, per_sample: usize) -> impl Iterator<Item = (usize, usize)> {
    const BLOCK: usize = 1 << 15;
    let step = (BLOCK / per_sample.max(1)).max(1);
    (0..n).step_by(step).map(move |s0| (s0, (s0 + step).min(n)))
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    f: usize,
    cin: usize,
    k: usize,
    cout: usize,
    fo: usize,
    spec: ConvSpec,
) {
    let width = k * cin;
    for (s0, s1) in sample_chunks(n, fo * width) {
        let cols = im2col(&x[s0 * f * cin..s1 * f * cin], s1 - s0, f, cin, k, fo, spec);
        let o = &mut out[s0 * fo * cout..s1 * fo * cout];
        gemm((s1 - s0) * fo, width, cout, &cols, [width, 1], w, [cout, 1], o, 0.0);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_t_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    f: usize,
    cin: usize,
    k: usize,
    cout: usize,
    fo: usize,
    spec: ConvSpec,
) {
    let width = k * cout;
    let wt = taps_by_input(w, k, cin, cout);
    for (s0, s1) in sample_chunks(n, f * width) {
        let rows = (s1 - s0) * f;
        let mut cols = vec![0.0; rows * width];
        gemm(rows, cin, width, &x[s0 * f * cin..s1 * f * cin], [cin, 1], &wt, [width, 1], &mut cols, 0.0);
        for s in s0..s1 {
            for q in 0..f {
                let r = (s - s0) * f + q;
                let row = &cols[r * width..(r + 1) * width];
                for j in 0..k {
                    if let Some(p) = tap_index(q, j, spec, fo) {
                        for (o, v) in out[(s * fo + p) * cout..(s * fo + p + 1) * cout].iter_mut().zip(&row[j * cout..]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Worst relative error between tape gradients and central finite differences
/// of the scalar function `f` at `x`.
///
/// The relative error of each coordinate is `|analytic - numeric|` divided by
/// `max(|analytic|, |numeric|, 1e-4)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::BadEpsilon(eps));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(TensorError::NotScalar(y.shape.clone()));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite(y));
        }
        Ok(y)
    };
    eval(x)?;
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data[i];
        let denom = a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
