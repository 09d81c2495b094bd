//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its forward value and enough metadata to
//! replay the chain rule. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order because inputs always
//! precede their consumers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, Conv2dGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward value is computed outside the graph and whose vector-
/// Jacobian product is supplied by the implementor.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Adds `d output / d input_i` contracted with `grad_output` into
    /// `input_grads[i]`. Entries are `None` for inputs that need no gradient;
    /// the others arrive zero-filled with the input's length.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    );
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Identity(Var),
    MulScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    TimeStep(Var, usize),
    StackTime(Vec<Var>),
    RepeatRows(Var, usize),
    WeightedSum(Var, Var),
    BatchDot(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Conv2d(Var, Var, Var, Conv2dGeom),
    MaxPool(Var, Vec<usize>),
    ColumnsToSeq(Var),
    LstmCell(Var, Var),
    SelectRows(Vec<bool>, Var, Var),
    MulConst(Var, Vec<f64>),
    Embedding(Var, Vec<usize>),
    NllProbs(Var, Vec<Option<usize>>, f64),
    LogAddExp(Var, Var),
    Norm2(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of tensor operations, built fresh for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient is tracked (used for gradient checks and
    /// for inputs that should be differentiated).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated binds return the same node.
    /// Non-trainable parameters enter the graph as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return shape_err("matmul", format!("{:?} x {:?}", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("log_add_exp", a, b)?;
        let t = self.zip(a, b, kernels::log_add_exp);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::LogAddExp(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(b).len() != n {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Identity(x), rg)
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<f64> {
        if self.value(s).len() != 1 {
            return shape_err(op, format!("expected one-element tensor, got {:?}", self.shape(s)));
        }
        Ok(self.value(s).item())
    }

    /// Multiplies every element by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar("mul_scalar", s)?;
        let t = self.map(x, |v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalarVar(x, s), rg))
    }

    /// Adds a one-element tensor to every element.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar("add_scalar_var", s)?;
        let t = self.map(x, |v| v + c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::AddScalarVar(x, s), rg))
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return shape_err("mul_const", format!("{} vs {}", c.len(), self.value(x).len()));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    // ── elementwise nonlinearities ──────────────────────────────────

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::ln);
        let rg = self.rg(&[x]);
        self.push(t, Op::Log(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::sqrt);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sqrt(x), rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / v);
        let rg = self.rg(&[x]);
        self.push(t, Op::Recip(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(t, Op::LeakyRelu(x, slope), rg)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` at train time, and
    /// inference returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::Contract(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    // ── reductions and normalizers ──────────────────────────────────

    /// Softmax over the last axis. Positions with `mask[i] == false` get
    /// exactly zero weight; a row with no valid entry is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return shape_err("softmax", format!("mask {} vs {}", m.len(), xv.len()));
            }
        }
        let mut out = vec![0.0; xv.len()];
        for (r, (row, o)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let valid = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::Contract(format!(
                    "softmax row {r} has no valid position"
                )));
            }
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    o[j] = (v - mx).exp();
                    s += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::SumAll(x), rg)
    }

    /// Euclidean norm of all elements as a one-element tensor.
    pub fn norm2(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sq_norm().sqrt());
        let rg = self.rg(&[x]);
        self.push(t, Op::Norm2(x), rg)
    }

    /// Sum over rows of `-ln(max(p[r, target_r], floor))`; rows with `None`
    /// target are skipped.
    pub fn nll_probs(&mut self, probs: Var, targets: Vec<Option<usize>>, floor: f64) -> Result<Var> {
        let pv = self.value(probs);
        let k = pv.last_dim();
        if targets.len() != pv.rows() {
            return shape_err("nll_probs", format!("{} targets for {} rows", targets.len(), pv.rows()));
        }
        let mut s = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= k {
                    return shape_err("nll_probs", format!("target {t} outside {k} classes"));
                }
                s -= pv.data()[r * k + t].max(floor).ln();
            }
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(s), Op::NllProbs(probs, targets, floor), rg))
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Identity(x), rg))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return shape_err("concat", format!("{:?} vs {:?}", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let d = self.value(x).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if start + len > n {
            return shape_err("slice_last", format!("{start}+{len} > {n}"));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast(x, start), rg))
    }

    /// Row `t` of every batch item: `[B, M, K] -> [B, K]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || t >= s[1] {
            return shape_err("time_step", format!("{:?} at {t}", s));
        }
        let (b, m, k) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * k);
        for bi in 0..b {
            out.extend_from_slice(&d[(bi * m + t) * k..(bi * m + t + 1) * k]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, k], out)?, Op::TimeStep(x, t), rg))
    }

    /// Inverse of [`Graph::time_step`]: `M x [B, K] -> [B, M, K]`.
    pub fn stack_time(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("stack_time", "no inputs");
        };
        let s = self.shape(first).to_vec();
        if s.len() != 2 {
            return shape_err("stack_time", format!("{:?}", s));
        }
        let (b, k, m) = (s[0], s[1], xs.len());
        let mut out = vec![0.0; b * m * k];
        for (t, &x) in xs.iter().enumerate() {
            if self.shape(x) != s.as_slice() {
                return shape_err("stack_time", format!("{:?} vs {:?}", self.shape(x), s));
            }
            let d = self.value(x).data();
            for bi in 0..b {
                out[(bi * m + t) * k..(bi * m + t + 1) * k].copy_from_slice(&d[bi * k..(bi + 1) * k]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(vec![b, m, k], out)?, Op::StackTime(xs.to_vec()), rg))
    }

    /// `[B, n] -> [B, reps, n]`, repeating each row.
    pub fn repeat_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err("repeat_rows", format!("{:?}", s));
        }
        let (b, n) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * reps * n);
        for bi in 0..b {
            for _ in 0..reps {
                out.extend_from_slice(&d[bi * n..(bi + 1) * n]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, reps, n], out)?, Op::RepeatRows(x, reps), rg))
    }

    /// `[B, H, W, C] -> [B, W, H*C]`: each image column becomes one vector,
    /// height-major.
    pub fn columns_to_sequence(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return shape_err("columns_to_sequence", format!("{:?}", s));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = (bi * w + xx) * h * c + y * c;
                    out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, w, h * c], out)?, Op::ColumnsToSeq(x), rg))
    }

    /// Picks rows of `a` where `mask` is true and rows of `b` elsewhere.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let av = self.value(a);
        let n = av.last_dim();
        if mask.len() != av.rows() {
            return shape_err("select_rows", format!("{} flags for {} rows", mask.len(), av.rows()));
        }
        let bv = self.value(b);
        let mut out = Vec::with_capacity(av.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { av } else { bv };
            out.extend_from_slice(&src.data()[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::SelectRows(mask, a, b), rg))
    }

    /// Rows of `table` selected by `ids`: `[V, D] -> [N, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return shape_err("embedding", format!("{:?}", s));
        }
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::Contract(format!("token id {i} outside table of {v}")));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding(table, ids.to_vec()),
            rg,
        ))
    }

    // ── batched sequence ops ────────────────────────────────────────

    /// `sum_j alpha[b, j] * h[b, j, :]`: `[B, M], [B, M, D] -> [B, D]`.
    pub fn weighted_sum(&mut self, alpha: Var, h: Var) -> Result<Var> {
        let (sa, sh) = (self.shape(alpha), self.shape(h));
        if sa.len() != 2 || sh.len() != 3 || sa[0] != sh[0] || sa[1] != sh[1] {
            return shape_err("weighted_sum", format!("{:?} . {:?}", sa, sh));
        }
        let (b, m, d) = (sh[0], sh[1], sh[2]);
        let (av, hv) = (self.value(alpha).data(), self.value(h).data());
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for j in 0..m {
                let w = av[bi * m + j];
                if w != 0.0 {
                    let row = &hv[(bi * m + j) * d..(bi * m + j + 1) * d];
                    o.iter_mut().zip(row).for_each(|(o, v)| *o += w * v);
                }
            }
        }
        let rg = self.rg(&[alpha, h]);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::WeightedSum(alpha, h), rg))
    }

    /// `h[b, j, :] . q[b, :]`: `[B, M, D], [B, D] -> [B, M]`.
    pub fn batch_dot(&mut self, h: Var, q: Var) -> Result<Var> {
        let (sh, sq) = (self.shape(h), self.shape(q));
        if sh.len() != 3 || sq.len() != 2 || sh[0] != sq[0] || sh[2] != sq[1] {
            return shape_err("batch_dot", format!("{:?} . {:?}", sh, sq));
        }
        let (b, m, d) = (sh[0], sh[1], sh[2]);
        let (hv, qv) = (self.value(h).data(), self.value(q).data());
        let mut out = vec![0.0; b * m];
        for bi in 0..b {
            let qr = &qv[bi * d..(bi + 1) * d];
            for j in 0..m {
                let row = &hv[(bi * m + j) * d..(bi * m + j + 1) * d];
                out[bi * m + j] = row.iter().zip(qr).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(&[h, q]);
        Ok(self.push(Tensor::new(vec![b, m], out)?, Op::BatchDot(h, q), rg))
    }

    fn col_check(&self, op: &'static str, x: Var, y: Var) -> Result<(usize, usize)> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != 2 || self.value(y).len() != sx[0] || (sy.len() == 2 && sy[1] != 1) {
            return shape_err(op, format!("{:?} with {:?}", sx, sy));
        }
        Ok((sx[0], sx[1]))
    }

    /// `x[b, j] + y[b]` for `x: [B, M]`, `y: [B, 1]`.
    pub fn add_col(&mut self, x: Var, y: Var) -> Result<Var> {
        let (b, m) = self.col_check("add_col", x, y)?;
        let yv = self.value(y).data().to_vec();
        let mut t = self.value(x).clone();
        for bi in 0..b {
            t.data_mut()[bi * m..(bi + 1) * m].iter_mut().for_each(|v| *v += yv[bi]);
        }
        let rg = self.rg(&[x, y]);
        Ok(self.push(t, Op::AddCol(x, y), rg))
    }

    /// `x[b, j] * y[b]` for `x: [B, M]`, `y: [B, 1]`.
    pub fn mul_col(&mut self, x: Var, y: Var) -> Result<Var> {
        let (b, m) = self.col_check("mul_col", x, y)?;
        let yv = self.value(y).data().to_vec();
        let mut t = self.value(x).clone();
        for bi in 0..b {
            t.data_mut()[bi * m..(bi + 1) * m].iter_mut().for_each(|v| *v *= yv[bi]);
        }
        let rg = self.rg(&[x, y]);
        Ok(self.push(t, Op::MulCol(x, y), rg))
    }

    // ── convolution family ──────────────────────────────────────────

    /// NHWC convolution with "same" ceiling padding. `kernel` is
    /// `[kh, kw, Cin, Cout]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: (usize, usize)) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] {
            return shape_err("conv2d", format!("input {:?} kernel {:?}", sx, sk));
        }
        if sx[1] == 0 || sx[2] == 0 {
            return shape_err("conv2d", format!("zero-sized spatial dimension {:?}", sx));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return shape_err("conv2d", "zero stride");
        }
        let cout = sk[3];
        if self.value(bias).len() != cout {
            return shape_err("conv2d", format!("bias {:?} for {cout} filters", self.shape(bias)));
        }
        let geom = Conv2dGeom::new(sx[0], sx[1], sx[2], sx[3], (sk[0], sk[1]), stride);
        let col = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.out_positions();
        let mut out = vec![0.0; rows * cout];
        kernels::gemm(
            rows,
            geom.patch(),
            cout,
            &col,
            false,
            self.value(kernel).data(),
            false,
            0.0,
            &mut out,
        );
        let bv = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, cout], out)?;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(t, Op::Conv2d(x, kernel, bias, geom), rg))
    }

    /// 1D convolution over `[B, M, Cin]` with kernel `[kw, Cin, Cout]`,
    /// stride 1 and "same" padding.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 3 {
            return shape_err("conv1d", format!("input {:?} kernel {:?}", sx, sk));
        }
        let x4 = self.reshape(x, &[sx[0], 1, sx[1], sx[2]])?;
        let k4 = self.reshape(kernel, &[1, sk[0], sk[1], sk[2]])?;
        let y = self.conv2d(x4, k4, bias, (1, 1))?;
        self.reshape(y, &[sx[0], sx[1], sk[2]])
    }

    /// Max pooling with "same" ceiling padding over NHWC input.
    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[1] == 0 || sx[2] == 0 {
            return shape_err("maxpool2d", format!("{:?}", sx));
        }
        let geom = Conv2dGeom::new(sx[0], sx[1], sx[2], sx[3], kernel, stride);
        let (out, arg) = kernels::maxpool_forward(self.value(x).data(), &geom);
        let t = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, sx[3]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool(x, arg), rg))
    }

    /// Fused LSTM cell: pre-activations `z: [B, 4H]` (gates i, f, g, o) and
    /// previous cell `c: [B, H]` to `[B, 2H]` holding `[h | c]`.
    pub fn lstm_cell(&mut self, z: Var, c_prev: Var) -> Result<Var> {
        let (sz, sc) = (self.shape(z), self.shape(c_prev));
        if sz.len() != 2 || sc.len() != 2 || sz[0] != sc[0] || sz[1] != 4 * sc[1] {
            return shape_err("lstm_cell", format!("z {:?} c {:?}", sz, sc));
        }
        let (b, h) = (sc[0], sc[1]);
        let out = kernels::lstm_cell_forward(self.value(z).data(), self.value(c_prev).data(), b, h);
        let rg = self.rg(&[z, c_prev]);
        Ok(self.push(Tensor::new(vec![b, 2 * h], out)?, Op::LstmCell(z, c_prev), rg))
    }

    /// Appends a node computed by an external kernel.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Writes each parameter's gradient into `store`. Parameters that were
    /// never bound, or that the loss does not reach, receive zeros.
    pub fn store_param_grads(&self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let grad = self
                .bound
                .get(&id)
                .and_then(|v| self.grad(*v))
                .map(|g| Tensor::new(shape.clone(), g.to_vec()).expect("grad shape"))
                .unwrap_or_else(|| Tensor::zeros(&shape));
            store.get_mut(id).grad = Some(grad);
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (k, n) = (val(*b).dim(0), val(*b).dim(1));
            let m = val(*a).len() / k.max(1);
            let bv = val(*b).data();
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::gemm(m, n, k, g, false, &bv, true, 1.0, ga);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::gemm(k, m, n, val(*a).data(), true, g, false, 1.0, gb);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
        }
        Op::LogAddExp(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let o = out.data();
            let w = |x: f64, o: f64| if o == f64::NEG_INFINITY { 0.0 } else { (x - o).exp() };
            if let Some(ga) = acc(grads, nodes, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * w(av[j], o[j]);
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for j in 0..g.len() {
                    gb[j] += g[j] * w(bv[j], o[j]);
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let n = gb.len();
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::Identity(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
        }
        Op::MulScalarVar(x, s) => {
            let c = val(*s).item();
            let xv = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Op::AddScalarVar(x, s) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
            if let Some(gs) = acc(grads, nodes, *s) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        Op::MulConst(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * c[j];
                }
            }
        }
        Op::Tanh(x) => unary(nodes, grads, *x, g, out, |_, y| 1.0 - y * y),
        Op::Sigmoid(x) => unary(nodes, grads, *x, g, out, |_, y| y * (1.0 - y)),
        Op::Exp(x) => unary(nodes, grads, *x, g, out, |_, y| y),
        Op::Log(x) => unary(nodes, grads, *x, g, out, |x, _| 1.0 / x),
        Op::Sqrt(x) => unary(nodes, grads, *x, g, out, |_, y| 0.5 / y),
        Op::Recip(x) => unary(nodes, grads, *x, g, out, |_, y| -y * y),
        Op::LeakyRelu(x, slope) => {
            let s = *slope;
            unary(nodes, grads, *x, g, out, move |x, _| if x > 0.0 { 1.0 } else { s })
        }
        Op::Softmax(x) => {
            let n = out.last_dim();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((y, gr), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let n = out.last_dim();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((y, gr), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        gxr[j] += gr[j] - y[j].exp() * s;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Norm2(x) => {
            let nrm = out.item();
            let xv = val(*x).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                if nrm > 0.0 {
                    for j in 0..xv.len() {
                        gx[j] += g[0] * xv[j] / nrm;
                    }
                }
            }
        }
        Op::NllProbs(p, targets, floor) => {
            let k = val(*p).last_dim();
            let pv = val(*p).data();
            if let Some(gp) = acc(grads, nodes, *p) {
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let q = pv[r * k + t];
                        if q > *floor {
                            gp[r * k + t] -= g[0] / q;
                        }
                    }
                }
            }
        }
        Op::Concat(xs) => {
            let total = out.last_dim();
            let rows = out.rows();
            let mut off = 0;
            for x in xs {
                let w = val(*x).last_dim();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for r in 0..rows {
                        add_into(&mut gx[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::SliceLast(x, start) => {
            let n = val(*x).last_dim();
            let len = out.last_dim();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, gr) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * n + start..r * n + start + len], gr);
                }
            }
        }
        Op::TimeStep(x, t) => {
            let s = val(*x).shape();
            let (b, m, k) = (s[0], s[1], s[2]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for bi in 0..b {
                    add_into(&mut gx[(bi * m + t) * k..(bi * m + t + 1) * k], &g[bi * k..(bi + 1) * k]);
                }
            }
        }
        Op::StackTime(xs) => {
            let s = out.shape();
            let (b, m, k) = (s[0], s[1], s[2]);
            for (t, x) in xs.iter().enumerate() {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for bi in 0..b {
                        add_into(&mut gx[bi * k..(bi + 1) * k], &g[(bi * m + t) * k..(bi * m + t + 1) * k]);
                    }
                }
            }
        }
        Op::RepeatRows(x, reps) => {
            let n = out.last_dim();
            if let Some(gx) = acc(grads, nodes, *x) {
                let b = gx.len() / n.max(1);
                for bi in 0..b {
                    for r in 0..*reps {
                        let src = (bi * reps + r) * n;
                        add_into(&mut gx[bi * n..(bi + 1) * n], &g[src..src + n]);
                    }
                }
            }
        }
        Op::ColumnsToSeq(x) => {
            let s = val(*x).shape();
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((bi * h + y) * w + xx) * c;
                            let src = (bi * w + xx) * h * c + y * c;
                            add_into(&mut gx[dst..dst + c], &g[src..src + c]);
                        }
                    }
                }
            }
        }
        Op::SelectRows(mask, a, b) => {
            let n = out.last_dim();
            for (var, want) in [(*a, true), (*b, false)] {
                if let Some(gv) = acc(grads, nodes, var) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            add_into(&mut gv[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::Embedding(table, ids) => {
            let d = out.last_dim();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::WeightedSum(alpha, h) => {
            let s = val(*h).shape();
            let (b, m, d) = (s[0], s[1], s[2]);
            let av = val(*alpha).data();
            let hv = val(*h).data();
            if let Some(ga) = acc(grads, nodes, *alpha) {
                for bi in 0..b {
                    let gr = &g[bi * d..(bi + 1) * d];
                    for j in 0..m {
                        let row = &hv[(bi * m + j) * d..(bi * m + j + 1) * d];
                        ga[bi * m + j] += row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if let Some(gh) = acc(grads, nodes, *h) {
                for bi in 0..b {
                    let gr = &g[bi * d..(bi + 1) * d];
                    for j in 0..m {
                        let w = av[bi * m + j];
                        let row = &mut gh[(bi * m + j) * d..(bi * m + j + 1) * d];
                        row.iter_mut().zip(gr).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
        }
        Op::BatchDot(h, q) => {
            let s = val(*h).shape();
            let (b, m, d) = (s[0], s[1], s[2]);
            let hv = val(*h).data();
            let qv = val(*q).data();
            if let Some(gh) = acc(grads, nodes, *h) {
                for bi in 0..b {
                    for j in 0..m {
                        let w = g[bi * m + j];
                        let row = &mut gh[(bi * m + j) * d..(bi * m + j + 1) * d];
                        row.iter_mut().zip(&qv[bi * d..(bi + 1) * d]).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
            if let Some(gq) = acc(grads, nodes, *q) {
                for bi in 0..b {
                    for j in 0..m {
                        let w = g[bi * m + j];
                        let row = &hv[(bi * m + j) * d..(bi * m + j + 1) * d];
                        gq[bi * d..(bi + 1) * d].iter_mut().zip(row).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
        }
        Op::AddCol(x, y) => {
            let m = out.last_dim();
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g);
            }
            if let Some(gy) = acc(grads, nodes, *y) {
                for (bi, gr) in g.chunks(m).enumerate() {
                    gy[bi] += gr.iter().sum::<f64>();
                }
            }
        }
        Op::MulCol(x, y) => {
            let m = out.last_dim();
            let xv = val(*x).data();
            let yv = val(*y).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (j, d) in gx.iter_mut().enumerate() {
                    *d += g[j] * yv[j / m];
                }
            }
            if let Some(gy) = acc(grads, nodes, *y) {
                for (j, gv) in g.iter().enumerate() {
                    gy[j / m] += gv * xv[j];
                }
            }
        }
        Op::Conv2d(x, k, b, geom) => {
            let cout = out.last_dim();
            let rows = geom.out_positions();
            let patch = geom.patch();
            if nodes[k.0].requires_grad {
                let col = kernels::im2col(val(*x).data(), geom);
                let gk = acc(grads, nodes, *k).expect("requires grad");
                kernels::gemm(patch, rows, cout, &col, true, g, false, 1.0, gk);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks(cout) {
                    add_into(gb, row);
                }
            }
            if nodes[x.0].requires_grad {
                let mut gcol = vec![0.0; rows * patch];
                kernels::gemm(rows, cout, patch, g, false, val(*k).data(), true, 0.0, &mut gcol);
                let gx = acc(grads, nodes, *x).expect("requires grad");
                kernels::col2im_add(&gcol, geom, gx);
            }
        }
        Op::MaxPool(x, arg) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (j, &src) in arg.iter().enumerate() {
                    if src != usize::MAX {
                        gx[src] += g[j];
                    }
                }
            }
        }
        Op::LstmCell(z, c) => {
            let h = val(*c).last_dim();
            let b = val(*c).rows();
            let zv = val(*z).data();
            let cv = val(*c).data();
            let mut gz_buf = nodes[z.0].requires_grad.then(|| vec![0.0; zv.len()]);
            let mut gc_buf = nodes[c.0].requires_grad.then(|| vec![0.0; cv.len()]);
            kernels::lstm_cell_backward(
                &zv,
                &cv,
                out.data(),
                g,
                b,
                h,
                gz_buf.as_deref_mut(),
                gc_buf.as_deref_mut(),
            );
            if let (Some(buf), Some(gz)) = (gz_buf, acc(grads, nodes, *z)) {
                add_into(gz, &buf);
            }
            if let (Some(buf), Some(gc)) = (gc_buf, acc(grads, nodes, *c)) {
                add_into(gc, &buf);
            }
        }
        Op::Custom(inputs, op) => {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let mut bufs: Vec<Option<Vec<f64>>> = inputs
                .iter()
                .map(|v| nodes[v.0].requires_grad.then(|| vec![0.0; nodes[v.0].value.len()]))
                .collect();
            op.backward(&ins, out, g, &mut bufs);
            for (v, buf) in inputs.iter().zip(bufs) {
                if let (Some(buf), Some(gv)) = (buf, acc(grads, nodes, *v)) {
                    add_into(gv, &buf);
                }
            }
        }
    }
}

/// Elementwise backward where `d(out)/d(x) = f(x, out)`.
fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    g: &[f64],
    out: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) {
    let xv = nodes[x.0].value.data();
    let yv = out.data();
    let deriv: Vec<f64> = xv.iter().zip(yv).map(|(&a, &b)| f(a, b)).collect();
    if let Some(gx) = acc(grads, nodes, x) {
        for j in 0..g.len() {
            gx[j] += g[j] * deriv[j];
        }
    }
}
