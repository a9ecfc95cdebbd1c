//! Tensor-level reverse-mode tape.
//!
//! Every node holds a dense row-major [`Tensor`]. Operations are recorded in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation. Nodes that cannot reach a
//! differentiable leaf are never visited by the sweep.

use std::fmt;

use super::tensor::Tensor;
use super::AdError;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with negative slope 0.2.
    LeakyRelu,
    Softplus,
    Sigmoid,
    Swish,
    Tanh,
    Exp,
    Ln,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
            Activation::Ln => x.ln(),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Exp => y,
            Activation::Ln => T::one() / x,
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// A differentiable operation defined outside the tape core.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the op only has to provide the vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Returns one entry per input: `None` when the input gets no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Concat(Vec<Var>),
    Slice {
        a: Var,
        start: usize,
    },
    SumAll(Var),
    MeanRows(Var),
    SqError {
        pred: Var,
        target: Var,
        weight: Option<Tensor<T>>,
    },
    RmsNorm(Var),
    NormalizeRows(Var),
    PosEnc {
        a: Var,
        freqs: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

const RMS_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies the current value of `v` as a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.value(v).clone();
        self.constant(val)
    }

    /// `y = x W^T + b` with `x: n x in`, `W: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AdError> {
        let (n, din) = self.shape(x);
        let (dout, win) = self.shape(w);
        if din != win {
            return Err(AdError::Shape(format!(
                "linear: input width {din} vs weight {dout}x{win}"
            )));
        }
        let mut out = Tensor::zeros(n, dout);
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            T::gemm(
                n,
                din,
                dout,
                T::one(),
                &xv.data,
                din as isize,
                1,
                &wv.data,
                1,
                din as isize,
                T::zero(),
                &mut out.data,
                dout as isize,
                1,
            );
        }
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            if bv.shape() != (1, dout) {
                return Err(AdError::Shape(format!("linear: bias {:?} vs out {dout}", bv.shape())));
            }
            for r in 0..n {
                for (o, &bb) in out.data[r * dout..(r + 1) * dout].iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        Tensor::new(
            av.rows,
            av.cols,
            av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn check_row(&self, a: Var, row: Var, what: &str) -> Result<(), AdError> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(AdError::Shape(format!(
                "{what}: row {:?} vs width {c}",
                self.shape(row)
            )));
        }
        Ok(())
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AdError> {
        self.check_row(a, row, "add_row")?;
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let c = av.cols;
        let mut out = av.clone();
        for r in 0..av.rows {
            for (o, &x) in out.data[r * c..(r + 1) * c].iter_mut().zip(&rv.data) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AdError> {
        self.check_row(a, row, "mul_row")?;
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let c = av.cols;
        let mut out = av.clone();
        for r in 0..av.rows {
            for (o, &x) in out.data[r * c..(r + 1) * c].iter_mut().zip(&rv.data) {
                *o *= x;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.nodes[a.0].value.map(|x| kind.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Act(a, kind), rg)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| AdError::Shape("concat of nothing".into()))?;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(AdError::Shape("concat: row mismatch".into()));
            }
            cols += self.shape(p).1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let pc = pv.cols;
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pc].copy_from_slice(&pv.data[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(AdError::Shape(format!("slice {start}+{len} of width {cols}")));
        }
        let av = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&av.data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice { a, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = av.shape();
        let mut out = Tensor::zeros(1, c);
        for r in 0..n {
            for (o, &x) in out.data.iter_mut().zip(&av.data[r * c..(r + 1) * c]) {
                *o += x;
            }
        }
        let inv = T::one() / T::from_usize(n.max(1)).unwrap();
        out.scale_assign(inv);
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// `sum(weight * (pred - target)^2)`; a missing weight means all ones.
    pub fn sq_error(&mut self, pred: Var, target: Var, weight: Option<Tensor<T>>) -> Result<Var, AdError> {
        self.same_shape(pred, target, "sq_error")?;
        if let Some(w) = &weight {
            if w.shape() != self.shape(pred) {
                return Err(AdError::Shape("sq_error weight shape".into()));
            }
        }
        let pv = &self.nodes[pred.0].value;
        let tv = &self.nodes[target.0].value;
        let s: T = match &weight {
            Some(w) => pv
                .data
                .iter()
                .zip(&tv.data)
                .zip(&w.data)
                .map(|((&p, &t), &w)| w * (p - t) * (p - t))
                .sum(),
            None => pv.data.iter().zip(&tv.data).map(|(&p, &t)| (p - t) * (p - t)).sum(),
        };
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::SqError { pred, target, weight }, rg))
    }

    /// Sum of squares of all entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let zero = self.constant(Tensor::zeros(r, c));
        self.sq_error(a, zero, None).expect("same shape")
    }

    /// Row-wise RMS normalisation, `x / sqrt(mean(x^2) + 1e-8)`.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = av.shape();
        let mut out = av.clone();
        let cf = T::from_usize(c).unwrap();
        for r in 0..n {
            let row = &mut out.data[r * c..(r + 1) * c];
            let ms: T = row.iter().map(|&x| x * x).sum::<T>() / cf;
            let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::RmsNorm(a), rg)
    }

    /// Row-wise projection onto the unit sphere.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = av.shape();
        let mut out = av.clone();
        for r in 0..n {
            let row = &mut out.data[r * c..(r + 1) * c];
            let nrm = (row.iter().map(|&x| x * x).sum::<T>() + T::lit(NORM_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x /= nrm);
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows(a), rg)
    }

    /// Sinusoidal encoding `(sin 2^k pi p, cos 2^k pi p)` for k in `0..freqs`,
    /// coordinate-major: each input column expands to `2 * freqs` outputs.
    pub fn positional_encode(&mut self, a: Var, freqs: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let out = posenc_forward(av, freqs);
        let rg = self.rg(a);
        self.push(out, Op::PosEnc { a, freqs }, rg)
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, AdError> {
        if self.shape(output) != (1, 1) {
            return Err(AdError::NonScalar(self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.propagate(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, lo: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = val(*x).shape();
                let dout = val(*w).rows;
                if rg(*x) {
                    let buf = buf(lo, *x, (n, din));
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        &g.data,
                        dout as isize,
                        1,
                        &val(*w).data,
                        din as isize,
                        1,
                        T::one(),
                        &mut buf.data,
                        din as isize,
                        1,
                    );
                }
                if rg(*w) {
                    let buf = buf(lo, *w, (dout, din));
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        &g.data,
                        1,
                        dout as isize,
                        &val(*x).data,
                        din as isize,
                        1,
                        T::one(),
                        &mut buf.data,
                        din as isize,
                        1,
                    );
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let buf = buf(lo, *b, (1, dout));
                        for r in 0..n {
                            for (o, &gg) in buf.data.iter_mut().zip(&g.data[r * dout..(r + 1) * dout]) {
                                *o += gg;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        buf(lo, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    buf(lo, *a, g.shape()).add_assign(g);
                }
                if rg(*b) {
                    let t = buf(lo, *b, g.shape());
                    for (o, &gg) in t.data.iter_mut().zip(&g.data) {
                        *o -= gg;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let other = val(*b);
                    let t = buf(lo, *a, g.shape());
                    for ((o, &gg), &y) in t.data.iter_mut().zip(&g.data).zip(&other.data) {
                        *o += gg * y;
                    }
                }
                if rg(*b) {
                    let other = val(*a);
                    let t = buf(lo, *b, g.shape());
                    for ((o, &gg), &y) in t.data.iter_mut().zip(&g.data).zip(&other.data) {
                        *o += gg * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    buf(lo, *a, g.shape()).add_assign(g);
                }
                if rg(*row) {
                    let c = g.cols;
                    let t = buf(lo, *row, (1, c));
                    for r in 0..g.rows {
                        for (o, &gg) in t.data.iter_mut().zip(&g.data[r * c..(r + 1) * c]) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = g.cols;
                if rg(*a) {
                    let rv = val(*row);
                    let t = buf(lo, *a, g.shape());
                    for r in 0..g.rows {
                        for ((o, &gg), &s) in t.data[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g.data[r * c..(r + 1) * c])
                            .zip(&rv.data)
                        {
                            *o += gg * s;
                        }
                    }
                }
                if rg(*row) {
                    let av = val(*a);
                    let t = buf(lo, *row, (1, c));
                    for r in 0..g.rows {
                        for ((o, &gg), &x) in t
                            .data
                            .iter_mut()
                            .zip(&g.data[r * c..(r + 1) * c])
                            .zip(&av.data[r * c..(r + 1) * c])
                        {
                            *o += gg * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    let t = buf(lo, *a, g.shape());
                    for (o, &gg) in t.data.iter_mut().zip(&g.data) {
                        *o += gg * *s;
                    }
                }
            }
            Op::Act(a, kind) => {
                if rg(*a) {
                    let x = val(*a);
                    let y = &node.value;
                    let t = buf(lo, *a, g.shape());
                    for (((o, &gg), &xx), &yy) in t.data.iter_mut().zip(&g.data).zip(&x.data).zip(&y.data) {
                        *o += gg * kind.derivative(xx, yy);
                    }
                }
            }
            Op::Concat(parts) => {
                let cols = g.cols;
                let mut off = 0;
                for &p in parts {
                    let (rows, pc) = val(p).shape();
                    if rg(p) {
                        let t = buf(lo, p, (rows, pc));
                        for r in 0..rows {
                            for (o, &gg) in t.data[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(&g.data[r * cols + off..r * cols + off + pc])
                            {
                                *o += gg;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Slice { a, start } => {
                if rg(*a) {
                    let (rows, cols) = val(*a).shape();
                    let len = g.cols;
                    let t = buf(lo, *a, (rows, cols));
                    for r in 0..rows {
                        for (o, &gg) in t.data[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(&g.data[r * len..(r + 1) * len])
                        {
                            *o += gg;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if rg(*a) {
                    let s = g.item();
                    let t = buf(lo, *a, val(*a).shape());
                    t.data.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRows(a) => {
                if rg(*a) {
                    let (n, c) = val(*a).shape();
                    let inv = T::one() / T::from_usize(n.max(1)).unwrap();
                    let t = buf(lo, *a, (n, c));
                    for r in 0..n {
                        for (o, &gg) in t.data[r * c..(r + 1) * c].iter_mut().zip(&g.data) {
                            *o += gg * inv;
                        }
                    }
                }
            }
            Op::SqError { pred, target, weight } => {
                let s = g.item();
                let two = T::lit(2.0);
                let pv = val(*pred);
                let tv = val(*target);
                let shape = pv.shape();
                let coef = |i: usize| -> T {
                    let w = weight.as_ref().map_or(T::one(), |w| w.data[i]);
                    two * s * w * (pv.data[i] - tv.data[i])
                };
                if rg(*pred) {
                    let t = buf(lo, *pred, shape);
                    for (i, o) in t.data.iter_mut().enumerate() {
                        *o += coef(i);
                    }
                }
                if rg(*target) {
                    let t = buf(lo, *target, shape);
                    for (i, o) in t.data.iter_mut().enumerate() {
                        *o -= coef(i);
                    }
                }
            }
            Op::RmsNorm(a) => {
                if rg(*a) {
                    let x = val(*a);
                    let y = &node.value;
                    let (n, c) = x.shape();
                    let cf = T::from_usize(c).unwrap();
                    let t = buf(lo, *a, (n, c));
                    for r in 0..n {
                        let xr = &x.data[r * c..(r + 1) * c];
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &g.data[r * c..(r + 1) * c];
                        let ms: T = xr.iter().map(|&v| v * v).sum::<T>() / cf;
                        let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
                        let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                        for ((o, &gg), &yy) in t.data[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *o += (gg - yy * gy) * inv;
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if rg(*a) {
                    let x = val(*a);
                    let y = &node.value;
                    let (n, c) = x.shape();
                    let t = buf(lo, *a, (n, c));
                    for r in 0..n {
                        let xr = &x.data[r * c..(r + 1) * c];
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &g.data[r * c..(r + 1) * c];
                        let nrm = (xr.iter().map(|&v| v * v).sum::<T>() + T::lit(NORM_EPS)).sqrt();
                        let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gg), &yy) in t.data[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *o += (gg - yy * gy) / nrm;
                        }
                    }
                }
            }
            Op::PosEnc { a, freqs } => {
                if rg(*a) {
                    let (n, c) = val(*a).shape();
                    let y = &node.value;
                    let w = 2 * freqs;
                    let t = buf(lo, *a, (n, c));
                    let pi = T::lit(std::f64::consts::PI);
                    for r in 0..n {
                        for j in 0..c {
                            let base = r * c * w + j * w;
                            let mut acc = T::zero();
                            let mut f = pi;
                            for k in 0..*freqs {
                                let s = y.data[base + 2 * k];
                                let co = y.data[base + 2 * k + 1];
                                acc += f * (g.data[base + 2 * k] * co - g.data[base + 2 * k + 1] * s);
                                f = f + f;
                            }
                            t.data[r * c + j] += acc;
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let out = op.backward(&ins, &node.value, g);
                debug_assert_eq!(out.len(), inputs.len(), "{} backward arity", op.name());
                for (&v, gi) in inputs.iter().zip(out) {
                    if let Some(gi) = gi {
                        if rg(v) {
                            buf(lo, v, gi.shape()).add_assign(&gi);
                        }
                    }
                }
            }
        }
    }
}

fn buf<T: Scalar>(lo: &mut [Option<Tensor<T>>], v: Var, shape: (usize, usize)) -> &mut Tensor<T> {
    lo[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

pub fn posenc_forward<T: Scalar>(a: &Tensor<T>, freqs: usize) -> Tensor<T> {
    let (n, c) = a.shape();
    let w = 2 * freqs;
    let mut out = Tensor::zeros(n, c * w);
    let pi = T::lit(std::f64::consts::PI);
    for r in 0..n {
        for j in 0..c {
            let p = a.data[r * c + j];
            let base = r * c * w + j * w;
            let mut f = pi;
            for k in 0..freqs {
                let (s, co) = (f * p).sin_cos();
                out.data[base + 2 * k] = s;
                out.data[base + 2 * k + 1] = co;
                f = f + f;
            }
        }
    }
    out
}
