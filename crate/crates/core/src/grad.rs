//! Dense f64 tensors with a reverse-mode tape.
//!
//! Every tensor handled by the tape is a row-major matrix. Vectors are
//! `1 x n` rows. A [`Tape`] borrows a [`ParamStore`] immutably while the
//! forward pass is recorded; [`Tape::backward`] consumes the tape and hands
//! back a [`Gradients`] table which the caller folds into the store.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward needs a 1-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not finite: {0}")]
    NonFinite(f64),
}

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GradError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::row(vec![x])
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

    /// Rows of a rank-2 tensor; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Plain `a · b` without recording anything.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(GradError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(n, m);
    matmul_into(&a.data, &b.data, &mut out.data, n, k, m);
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax; masked columns get `-inf` (probability zero).
pub fn log_softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let allowed = |c: usize| mask.map_or(true, |m| !m[c]);
        let mx = (0..cols)
            .filter(|&c| allowed(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..cols)
            .filter(|&c| allowed(c))
            .map(|c| (row[c] - mx).exp())
            .sum();
        let lz = mx + z.ln();
        for (c, v) in row.iter_mut().enumerate() {
            *v = if allowed(c) { *v - lz } else { f64::NEG_INFINITY };
        }
    }
    out
}

/// Primitive kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Concat,
    Mul,
    Sigmoid,
    Tanh,
    LogSoftmax,
    Embedding,
    Slice,
    Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|p| Some(Tensor::zeros_like(&p.value)))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients laid end to end in parameter order; absent entries are zero.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_values());
        for (p, g) in store.iter().zip(&self.grads) {
            match g {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(p.value.len())),
            }
        }
        out
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    LogSoftmax(usize),
    Gather { table: usize, idx: Vec<usize> },
    PickSum { x: usize, picks: Vec<(usize, usize, f64)> },
    Sum(usize),
    Scale(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Record of one forward computation over a borrowed parameter store.
pub struct Tape<'p> {
    id: u64,
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<usize>>,
    fault: Option<Primitive>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Makes the backward rule of `prim` wrong on purpose. Only useful for
    /// checking that [`grad_check`] notices a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, prim: Primitive) {
        self.fault = Some(prim);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(GradError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &Tensor {
        let node = &self.nodes[idx];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(self.val(i))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(idx) = self.param_vars[id.0] {
            return Var { idx, tape: self.id };
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let idx = self.nodes.len() - 1;
        self.param_vars[id.0] = Some(idx);
        Var { idx, tape: self.id }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a + b` for equal shapes, or matrix plus a broadcast `1 x cols` row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rows() == tb.rows() && ta.cols() == tb.cols() {
            let mut out = ta.clone();
            out.add_assign(tb);
            Ok(self.push(out, Op::Add(ia, ib)))
        } else if tb.rows() == 1 && ta.cols() == tb.cols() {
            let mut out = ta.clone();
            let cols = ta.cols();
            for row in out.data.chunks_mut(cols) {
                for (o, b) in row.iter_mut().zip(&tb.data) {
                    *o += b;
                }
            }
            Ok(self.push(out, Op::AddRow(ia, ib)))
        } else {
            Err(GradError::Shape {
                op: "add",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            })
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(GradError::Shape {
                op: "mul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::matrix(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data.iter().map(|&v| sigmoid(v)).collect())?;
        Ok(self.push(out, Op::Sigmoid(ix)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data.iter().map(|v| v.tanh()).collect())?;
        Ok(self.push(out, Op::Tanh(ix)))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GradError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let idx = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.val(idx[0]).rows();
        for &i in &idx[1..] {
            if self.val(i).rows() != rows {
                return Err(GradError::Shape {
                    op: "concat",
                    lhs: self.val(idx[0]).shape.clone(),
                    rhs: self.val(i).shape.clone(),
                });
            }
        }
        let cols: usize = idx.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::Concat(idx)))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        if start + len > t.cols() {
            return Err(GradError::Invalid {
                op: "slice",
                msg: format!("columns {start}..{} out of {:?}", start + len, t.shape),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, data)?;
        Ok(self.push(out, Op::Slice { x: ix, start }))
    }

    /// Row-wise log-softmax. Masked columns hold `-inf` and receive no gradient.
    pub fn log_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        if let Some(m) = mask {
            if m.len() != t.cols() {
                return Err(GradError::Invalid {
                    op: "log_softmax",
                    msg: format!("mask of length {} for {} columns", m.len(), t.cols()),
                });
            }
            if m.iter().all(|&b| b) {
                return Err(GradError::Invalid {
                    op: "log_softmax",
                    msg: "every column masked".into(),
                });
            }
        }
        let out = log_softmax_rows(t, mask);
        Ok(self.push(out, Op::LogSoftmax(ix)))
    }

    /// Embedding lookup: output row `r` is row `idx[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let t = self.val(it);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(GradError::Invalid {
                op: "embedding",
                msg: format!("row {bad} out of {} rows", t.rows()),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), t.cols(), data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table: it,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `sum_k coef_k * x[row_k, col_k]` as a 1x1 tensor.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize, f64)]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let mut s = 0.0;
        for &(r, c, w) in picks {
            if r >= t.rows() || c >= t.cols() {
                return Err(GradError::Invalid {
                    op: "pick_sum",
                    msg: format!("({r},{c}) outside {:?}", t.shape),
                });
            }
            if w != 0.0 {
                s += w * t.get(r, c);
            }
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::PickSum {
                x: ix,
                picks: picks.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data.iter().map(|v| v * c).collect())?;
        Ok(self.push(out, Op::Scale(ix, c)))
    }

    /// Reverse sweep from a 1-element `output`; returns parameter gradients.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        let io = self.check(output)?;
        let out_t = self.val(io);
        if out_t.len() != 1 {
            return Err(GradError::NotScalar(out_t.shape.clone()));
        }
        if !out_t.data[0].is_finite() {
            return Err(GradError::NonFinite(out_t.data[0]));
        }
        let fault = self.fault;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[io] = Some(Tensor::new(out_t.shape.clone(), vec![1.0])?);
        let mut result: Vec<Option<Tensor>> = vec![None; self.params.len()];

        fn acc(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(s) => s.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..=io).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = self.val(i);
            match &node.op {
                Op::Param(id) => acc(&mut result[id.0], g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G B^T, dB = A^T G
                    let mut da = Tensor::zeros(n, k);
                    for r in 0..n {
                        let grow = g.row_slice(r);
                        for p in 0..k {
                            let brow = tb.row_slice(p);
                            da.data[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut db = Tensor::zeros(k, m);
                    for r in 0..n {
                        let grow = g.row_slice(r);
                        for p in 0..k {
                            let av = ta.data[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db.data[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    if fault == Some(Primitive::MatMul) {
                        da.data.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    acc(&mut grads[*a], da);
                    acc(&mut grads[*b], db);
                }
                Op::Add(a, b) => {
                    let mut gb = g.clone();
                    if fault == Some(Primitive::Add) {
                        gb.data.iter_mut().for_each(|v| *v *= -1.0);
                    }
                    acc(&mut grads[*a], g);
                    acc(&mut grads[*b], gb);
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(1, cols);
                    for row in g.data.chunks(cols) {
                        for (d, v) in gb.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    if fault == Some(Primitive::Add) {
                        gb.data.iter_mut().for_each(|v| *v *= -1.0);
                    }
                    acc(&mut grads[*a], g);
                    acc(&mut grads[*b], gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.val(*a), self.val(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    for ((x, y), (da, db)) in ta
                        .data
                        .iter()
                        .zip(&tb.data)
                        .zip(ga.data.iter_mut().zip(gb.data.iter_mut()))
                    {
                        *da *= y;
                        *db *= x;
                    }
                    if fault == Some(Primitive::Mul) {
                        std::mem::swap(&mut ga, &mut gb);
                    }
                    acc(&mut grads[*a], ga);
                    acc(&mut grads[*b], gb);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (d, s) in gx.data.iter_mut().zip(&out.data) {
                        *d *= if fault == Some(Primitive::Sigmoid) {
                            *s
                        } else {
                            s * (1.0 - s)
                        };
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (d, t) in gx.data.iter_mut().zip(&out.data) {
                        *d *= if fault == Some(Primitive::Tanh) {
                            1.0 - t
                        } else {
                            1.0 - t * t
                        };
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.val(p).cols();
                        let mut gp = Tensor::zeros(rows, c);
                        for r in 0..rows {
                            gp.data[r * c..(r + 1) * c]
                                .copy_from_slice(&g.row_slice(r)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads[p], gp);
                    }
                }
                Op::Slice { x, start } => {
                    let tx = self.val(*x);
                    let (rows, cols, len) = (tx.rows(), tx.cols(), g.cols());
                    let mut gx = Tensor::zeros(rows, cols);
                    let shift = usize::from(fault == Some(Primitive::Slice));
                    for r in 0..rows {
                        let s = (*start + shift).min(cols - len);
                        gx.data[r * cols + s..r * cols + s + len].copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::LogSoftmax(x) => {
                    // dx = g - softmax * sum(g) over unmasked columns
                    let cols = g.cols();
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let grow = g.row_slice(r);
                        let orow = out.row_slice(r);
                        let total: f64 = grow
                            .iter()
                            .zip(orow)
                            .filter(|(_, o)| o.is_finite())
                            .map(|(gv, _)| gv)
                            .sum();
                        for c in 0..cols {
                            let o = orow[c];
                            gx.data[r * cols + c] = if o.is_finite() {
                                let p = if fault == Some(Primitive::LogSoftmax) {
                                    0.5 * o.exp()
                                } else {
                                    o.exp()
                                };
                                grow[c] - p * total
                            } else {
                                0.0
                            };
                        }
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::Gather { table, idx } => {
                    let tt = self.val(*table);
                    let cols = tt.cols();
                    let mut gt = Tensor::zeros(tt.rows(), cols);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = if fault == Some(Primitive::Embedding) {
                            (src + 1) % tt.rows()
                        } else {
                            src
                        };
                        for (d, v) in gt.data[dst * cols..(dst + 1) * cols]
                            .iter_mut()
                            .zip(g.row_slice(r))
                        {
                            *d += v;
                        }
                    }
                    acc(&mut grads[*table], gt);
                }
                Op::PickSum { x, picks } => {
                    let tx = self.val(*x);
                    let gs = g.data[0];
                    let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                    let cols = tx.cols();
                    let bump = if fault == Some(Primitive::Reduce) { 2.0 } else { 1.0 };
                    for &(r, c, w) in picks {
                        gx.data[r * cols + c] += bump * w * gs;
                    }
                    acc(&mut grads[*x], gx);
                }
                Op::Sum(x) => {
                    let tx = self.val(*x);
                    let mut gx = Tensor::zeros_like(tx);
                    gx.fill(g.data[0]);
                    acc(&mut grads[*x], gx);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.data.iter_mut().for_each(|v| *v *= c);
                    acc(&mut grads[*x], gx);
                }
            }
        }
        Ok(Gradients { grads: result })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares tape gradients against central differences.
///
/// `loss_fn` records a scalar loss on the tape it is given. Up to
/// `per_param` coordinates are sampled from every parameter (all of them
/// when the parameter is smaller). Relative error per coordinate is
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F, R>(
    params: &ParamStore,
    loss_fn: F,
    epsilon: f64,
    per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
    R: Rng + ?Sized,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(GradError::Invalid {
            op: "grad_check",
            msg: format!("epsilon {epsilon} outside (0, 1e-3]"),
        });
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let v = tape.value(loss)?.data()[0];
        if !v.is_finite() {
            return Err(GradError::NonFinite(v));
        }
        Ok(v)
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let n = params.get(id).value.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = params.get(id).value.data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + epsilon;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig - epsilon;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[c] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let ad = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), c));
            }
        }
    }
    Ok(report)
}
