//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended after their inputs, so the node list is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Trainable parameters live outside the tape in a [`ParamStore`]; a tape
//! copies a parameter in on first use (see [`Tape::param`]) and
//! [`Gradients::params`] collects the accumulated gradients back by
//! [`ParamId`].

use std::collections::HashMap;

use rand::Rng;

use crate::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients, indexed by [`ParamId`]. `None` means the
/// parameter did not take part in the computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn from_vec(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Global L2 norm over every present gradient.
    pub fn global_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other` into `self`, used to accumulate over a mini-batch.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add_assign(g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in self.iter_mut() {
            g.scale_in_place(factor);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Sum(Var),
    MeanRows(Var),
    RowSum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Relu(Var),
    LogSigmoid(Var),
    Sin(Var),
    Cos(Var),
    L2Norm(Var),
    Euclid(Var, Var),
    RowNorm(Var),
    LowerHalf(Var),
    UpperHalf(Var),
    ConcatHalves(Var, Var),
    ComplexMul(Var, Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Dropout(Var, Tensor),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn even_cols(op: &'static str, t: &Tensor) -> Result<usize, NumericsError> {
    if !t.cols().is_multiple_of(2) {
        return Err(NumericsError::Invalid {
            op,
            reason: format!("width {} is not even", t.cols()),
        });
    }
    Ok(t.cols() / 2)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, op: Op, input: Var, value: Tensor) -> Var {
        let rg = self.rg(input);
        self.push(op, value, rg)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node
    /// so that every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let out = x.zip_map(y, |p, q| p + q);
        Ok(self.binary(Op::Add(a, b), a, b, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x, y));
        }
        let out = x.zip_map(y, |p, q| p - q);
        Ok(self.binary(Op::Sub(a, b), a, b, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.binary(Op::Mul(a, b), a, b, out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(Op::MatMul(a, b), a, b, out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.unary(Op::Scale(a, factor), a, out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.unary(Op::AddScalar(a), a, out)
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows() != 1 || y.cols() != x.cols() {
            return Err(shape_err("add_row", x, y));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(y.data()) {
                *o += bb;
            }
        }
        Ok(self.binary(Op::AddRow(a, b), a, b, out))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary(Op::Sum(a), a, out)
    }

    /// Mean over rows: `n x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(NumericsError::Invalid {
                op: "mean_rows",
                reason: "no rows".into(),
            });
        }
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / x.rows() as f64);
        Ok(self.unary(Op::MeanRows(a), a, out))
    }

    /// Per-row sum: `n x c -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(
            x.rows(),
            1,
            (0..x.rows()).map(|r| x.row(r).iter().sum()).collect(),
        )
        .expect("row count matches");
        self.unary(Op::RowSum(a), a, out)
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.unary(Op::Softmax(a), a, out)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.unary(Op::LogSoftmax(a), a, out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.unary(Op::Log(a), a, out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.unary(Op::Relu(a), a, out)
    }

    /// `log(sigmoid(x))`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.min(0.0) - (-x.abs()).exp().ln_1p());
        self.unary(Op::LogSigmoid(a), a, out)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.unary(Op::Sin(a), a, out)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::cos);
        self.unary(Op::Cos(a), a, out)
    }

    /// `||x||_2` over all entries, `1 x 1`.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).norm());
        self.unary(Op::L2Norm(a), a, out)
    }

    /// `||x - y||_2`, `1 x 1`. The gradient at zero distance is zero.
    pub fn euclid(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("euclid", x, y));
        }
        let d = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        Ok(self.binary(Op::Euclid(a, b), a, b, Tensor::scalar(d)))
    }

    /// Per-row L2 norm: `n x c -> n x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(
            x.rows(),
            1,
            (0..x.rows())
                .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        )
        .expect("row count matches");
        self.unary(Op::RowNorm(a), a, out)
    }

    /// Lower and upper column halves of an even-width tensor.
    pub fn split_halves(&mut self, a: Var) -> Result<(Var, Var), NumericsError> {
        let h = even_cols("split_halves", self.value(a))?;
        let lo = self.value(a).slice_cols(0, h);
        let hi = self.value(a).slice_cols(h, h);
        let lo = self.unary(Op::LowerHalf(a), a, lo);
        let hi = self.unary(Op::UpperHalf(a), a, hi);
        Ok((lo, hi))
    }

    /// Inverse of [`Tape::split_halves`]: `[lo | hi]`.
    pub fn concat_halves(&mut self, lo: Var, hi: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(lo), self.value(hi));
        if x.shape() != y.shape() {
            return Err(shape_err("concat_halves", x, y));
        }
        let h = x.cols();
        let mut out = Tensor::zeros(x.rows(), 2 * h);
        for r in 0..x.rows() {
            out.row_mut(r)[..h].copy_from_slice(x.row(r));
            out.row_mut(r)[h..].copy_from_slice(y.row(r));
        }
        Ok(self.binary(Op::ConcatHalves(lo, hi), lo, hi, out))
    }

    /// Row-wise complex product of half-split tensors. Each row of `a` is read
    /// as `a_lo + i a_hi`; the result is `[re | im]` in the same layout.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("complex_mul", x, y));
        }
        let h = even_cols("complex_mul", x)?;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (xr, yr) = (x.row(r), y.row(r));
            let o = out.row_mut(r);
            for i in 0..h {
                let (ar, ai, br, bi) = (xr[i], xr[h + i], yr[i], yr[h + i]);
                o[i] = ar * br - ai * bi;
                o[h + i] = ai * br + ar * bi;
            }
        }
        Ok(self.binary(Op::ComplexMul(a, b), a, b, out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.unary(Op::Transpose(a), a, out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(NumericsError::Invalid {
                op: "slice_cols",
                reason: format!("{start}+{len} exceeds width {}", x.cols()),
            });
        }
        let out = x.slice_cols(start, len);
        Ok(self.unary(Op::SliceCols(a, start), a, out))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Invalid {
                op: "concat_cols",
                reason: "no inputs".into(),
            });
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(NumericsError::Invalid {
                op: "gather_rows",
                reason: format!("row {bad} out of {}", x.rows()),
            });
        }
        let mut out = Tensor::zeros(indices.len(), x.cols());
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(x.row(i));
        }
        Ok(self.unary(Op::GatherRows(a, indices.to_vec()), a, out))
    }

    /// `out[r] = a[r, cols[r]]`, an `n x 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if cols.len() != x.rows() || cols.iter().any(|&c| c >= x.cols()) {
            return Err(NumericsError::Invalid {
                op: "pick_cols",
                reason: format!("{} indices for a {:?} tensor", cols.len(), x.shape()),
            });
        }
        let out = Tensor::from_vec(
            x.rows(),
            1,
            cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect(),
        )
        .expect("row count matches");
        Ok(self.unary(Op::PickCols(a, cols.to_vec()), a, out))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. A zero rate records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let x = self.value(a);
        let mut mask = Tensor::zeros(x.rows(), x.cols());
        for m in mask.data_mut() {
            if rng.random::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        let out = x.zip_map(&mask, |p, q| p * q);
        self.unary(Op::Dropout(a, mask), a, out)
    }

    /// Propagates from a `1 x 1` node back to every node that requires a
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |p, q| p * q));
                acc(*b, g.zip_map(self.value(*a), |p, q| p * q));
            }
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul(&w.transpose()).expect("shapes recorded"));
                }
                if self.rg(*b) {
                    acc(*b, x.transpose().matmul(g).expect("shapes recorded"));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let mut col = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in col.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*b, col);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut out = Tensor::zeros(r, c);
                let inv = 1.0 / r as f64;
                for k in 0..r {
                    for (o, &v) in out.row_mut(k).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                acc(*a, out);
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for k in 0..r {
                    let gk = g.get(k, 0);
                    out.row_mut(k).iter_mut().for_each(|o| *o = gk);
                }
                acc(*a, out);
            }
            Op::Softmax(a) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*a, out);
            }
            Op::LogSoftmax(a) => {
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - yr[c].exp() * gsum;
                    }
                }
                acc(*a, out);
            }
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |p, x| p / x)),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |p, x| if x > 0.0 { p } else { 0.0 }),
            ),
            Op::LogSigmoid(a) => acc(*a, g.zip_map(self.value(*a), |p, x| p * sigmoid(-x))),
            Op::Sin(a) => acc(*a, g.zip_map(self.value(*a), |p, x| p * x.cos())),
            Op::Cos(a) => acc(*a, g.zip_map(self.value(*a), |p, x| -p * x.sin())),
            Op::L2Norm(a) => {
                let n = y.item();
                let x = self.value(*a);
                if n > 0.0 {
                    let s = g.item() / n;
                    acc(*a, x.map(|v| v * s));
                } else {
                    acc(*a, Tensor::zeros(x.rows(), x.cols()));
                }
            }
            Op::Euclid(a, b) => {
                let n = y.item();
                let (x, z) = (self.value(*a), self.value(*b));
                let ga = if n > 0.0 {
                    let s = g.item() / n;
                    x.zip_map(z, |p, q| (p - q) * s)
                } else {
                    Tensor::zeros(x.rows(), x.cols())
                };
                acc(*b, ga.map(|v| -v));
                acc(*a, ga);
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = y.get(r, 0);
                    if n > 0.0 {
                        let s = g.get(r, 0) / n;
                        for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = v * s;
                        }
                    }
                }
                acc(*a, out);
            }
            Op::LowerHalf(a) | Op::UpperHalf(a) => {
                let x = self.value(*a);
                let h = x.cols() / 2;
                let offset = if matches!(node.op, Op::LowerHalf(_)) {
                    0
                } else {
                    h
                };
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    out.row_mut(r)[offset..offset + h].copy_from_slice(g.row(r));
                }
                acc(*a, out);
            }
            Op::ConcatHalves(lo, hi) => {
                let h = g.cols() / 2;
                acc(*lo, g.slice_cols(0, h));
                acc(*hi, g.slice_cols(h, h));
            }
            Op::ComplexMul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let h = x.cols() / 2;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let mut gb = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (xr, zr, gr) = (x.row(r), z.row(r), g.row(r));
                    for i in 0..h {
                        let (ar, ai, br, bi) = (xr[i], xr[h + i], zr[i], zr[h + i]);
                        let (gre, gim) = (gr[i], gr[h + i]);
                        ga.row_mut(r)[i] = gre * br + gim * bi;
                        ga.row_mut(r)[h + i] = -gre * bi + gim * br;
                        gb.row_mut(r)[i] = gre * ar + gim * ai;
                        gb.row_mut(r)[h + i] = -gre * ai + gim * ar;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::GatherRows(a, indices) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (o, &v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, out);
            }
            Op::PickCols(a, cols) => {
                let x = self.value(*a);
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for (r, &c) in cols.iter().enumerate() {
                    out.set(r, c, g.get(r, 0));
                }
                acc(*a, out);
            }
            Op::Dropout(a, mask) => acc(*a, g.zip_map(mask, |p, m| p * m)),
        }
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter brought onto `tape`, sized for `store`.
    pub fn params(&self, tape: &Tape, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store.len());
        for (&id, &v) in &tape.params {
            if let Some(g) = self.wrt(v) {
                out.grads[id.0] = Some(g.clone());
            }
        }
        out
    }
}
