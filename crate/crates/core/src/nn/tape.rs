//! Reverse-mode gradient tape over dense matrices.
//!
//! Every primitive appends a node holding its forward value. `backward` walks the
//! nodes in reverse insertion order, which is a valid topological order because an
//! op can only reference nodes that already exist.

use super::ops::{self, dot};
use super::Matrix;
use crate::error::{Error, Result};

/// Probability clamp applied before the logarithm in the logistic loss.
pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Gather { table: Var, ids: Vec<usize> },
    Conv { channels: Vec<Var>, filters: Var, bias: Var, window: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    MeanRows(Var),
    Mean(Var),
    Sum(Var),
    RowDot(Var, Var),
    RowSumSq(Var),
    BatchMatVec { mats: Var, vecs: Var },
    LogisticLoss { logits: Var, labels: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `v`'s shape when the loss does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var, tape: &Tape) -> Matrix {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (inputs, frozen tables).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// `a (r x c) + b (1 x c)` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, bias) = (self.value(a), self.value(b));
        if bias.rows() != 1 || bias.cols() != x.cols() {
            return Err(Error::dim("add_row", x.shape(), bias.shape()));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), ng))
    }

    /// Multiply row `i` of `a (r x c)` by `s[i]` where `s` is `r x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != x.rows() {
            return Err(Error::dim("scale_rows", x.shape(), sv.shape()));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            let k = sv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let ng = self.ng(&[a, s]);
        Ok(self.push(value, Op::ScaleRows(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let ng = self.ng(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("logarithm of a non-positive value".into()));
        }
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Ln(a), ng))
    }

    /// Select rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Lookup(format!("row {id} outside table of {} rows", t.rows())));
            }
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-filter valid convolution; see [`ops::conv_valid`] for layouts.
    pub fn conv(&mut self, channels: &[Var], filters: Var, bias: Var, window: usize) -> Result<Var> {
        let chans: Vec<&Matrix> = channels.iter().map(|&c| self.value(c)).collect();
        let value = ops::conv_valid(&chans, self.value(filters), self.value(bias), window)?;
        let mut deps = channels.to_vec();
        deps.extend([filters, bias]);
        let ng = self.ng(&deps);
        Ok(self.push(
            value,
            Op::Conv {
                channels: channels.to_vec(),
                filters,
                bias,
                window,
            },
            ng,
        ))
    }

    /// Column-wise max over rows: `p x m -> 1 x m`, first occurrence wins ties.
    pub fn max_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (p, m) = x.shape();
        if p == 0 {
            return Err(Error::Contract("max-pool over an empty feature map".into()));
        }
        let mut value = Matrix::zeros(1, m);
        let mut argmax = vec![0; m];
        let mut column = vec![0.0; p];
        for (j, slot) in argmax.iter_mut().enumerate() {
            for (i, c) in column.iter_mut().enumerate() {
                *c = x.get(i, j);
            }
            let (best, idx) = ops::max_over_time(&column)?;
            value.set(0, j, best);
            *slot = idx;
        }
        let ng = self.ng(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let p = ops::softmax(x.row(r))?;
            value.row_mut(r).copy_from_slice(&p);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Softmax(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut at = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != rows {
                return Err(Error::dim("concat_cols", (rows, at), x.shape()));
            }
            for r in 0..rows {
                value.row_mut(r)[at..at + x.cols()].copy_from_slice(x.row(r));
            }
            at += x.cols();
        }
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::dim("concat_rows", (rows, cols), x.shape()));
            }
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Tile a `1 x c` row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::dim("repeat_rows", x.shape(), (1, x.cols())));
        }
        let mut data = Vec::with_capacity(n * x.cols());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let value = Matrix::from_vec(n, x.cols(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::RepeatRows(a), ng))
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let mut value = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (v, e) in value.data_mut().iter_mut().zip(x.row(r)) {
                *v += e;
            }
        }
        let n = x.rows() as f64;
        value.data_mut().iter_mut().for_each(|v| *v /= n);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::MeanRows(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let value = Matrix::scalar(x.sum() / x.len() as f64);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Mean(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Row-wise inner product: `r x c, r x c -> r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("row_dot", x.shape(), y.shape()));
        }
        let data = (0..x.rows()).map(|r| dot(x.row(r), y.row(r))).collect();
        let value = Matrix::from_vec(x.rows(), 1, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), ng))
    }

    /// Row-wise squared L2 norm: `r x c -> r x 1`.
    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data: Vec<f64> = (0..x.rows()).map(|r| dot(x.row(r), x.row(r))).collect();
        let value = Matrix::column_vector(&data);
        let ng = self.ng(&[a]);
        self.push(value, Op::RowSumSq(a), ng)
    }

    /// Batched matrix-vector product. Row `b` of `mats` is a row-major
    /// `out x in` matrix applied to row `b` of `vecs` (`B x in`), giving `B x out`.
    pub fn batch_mat_vec(&mut self, mats: Var, vecs: Var) -> Result<Var> {
        let (m, v) = (self.value(mats), self.value(vecs));
        let k_in = v.cols();
        if m.rows() != v.rows() || k_in == 0 || m.cols() % k_in != 0 {
            return Err(Error::dim("batch_mat_vec", m.shape(), v.shape()));
        }
        let k_out = m.cols() / k_in;
        let mut value = Matrix::zeros(v.rows(), k_out);
        for b in 0..v.rows() {
            let mrow = m.row(b);
            let vrow = v.row(b);
            for i in 0..k_out {
                value.set(b, i, dot(&mrow[i * k_in..(i + 1) * k_in], vrow));
            }
        }
        let ng = self.ng(&[mats, vecs]);
        Ok(self.push(value, Op::BatchMatVec { mats, vecs }, ng))
    }

    /// Mean binary log loss over all entries of `logits`, with probabilities
    /// clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn logistic_loss(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.is_empty() {
            return Err(Error::dim("logistic_loss", z.shape(), (labels.len(), 1)));
        }
        let probs: Vec<f64> = z.data().iter().map(|&v| ops::sigmoid(v)).collect();
        let mut total = 0.0;
        for (&p, &y) in probs.iter().zip(labels) {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let value = Matrix::scalar(total / labels.len() as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            value,
            Op::LogisticLoss {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn zeros_like(&self, v: Var) -> Matrix {
        let (r, c) = self.shape(v);
        Matrix::zeros(r, c)
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let da = Matrix::from_vec(x.rows(), x.cols(), g.data().iter().zip(z.data()).map(|(p, q)| p * q).collect())?;
                let db = Matrix::from_vec(x.rows(), x.cols(), g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect())?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, column_sums(g))?;
            }
            Op::ScaleRows(a, s) => {
                let (x, sv) = (self.value(*a), self.value(*s));
                let mut da = g.clone();
                let mut ds = Matrix::zeros(x.rows(), 1);
                for r in 0..x.rows() {
                    let k = sv.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    ds.set(r, 0, dot(g.row(r), x.row(r)));
                }
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *s, ds)?;
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Tanh(a) => {
                let d = Matrix::from_vec(y.rows(), y.cols(), g.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect())?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = Matrix::from_vec(x.rows(), x.cols(), g.data().iter().zip(x.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = Matrix::from_vec(x.rows(), x.cols(), g.data().iter().zip(x.data()).map(|(g, v)| g / v).collect())?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Gather { table, ids } => {
                if self.nodes[table.0].needs_grad {
                    let mut d = self.zeros_like(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *t += v;
                        }
                    }
                    self.accumulate(grads, *table, d)?;
                }
            }
            Op::Conv {
                channels,
                filters,
                bias,
                window,
            } => self.backprop_conv(channels, *filters, *bias, *window, g, grads)?,
            Op::MaxPool { input, argmax } => {
                let mut d = self.zeros_like(*input);
                for (j, &i) in argmax.iter().enumerate() {
                    d.set(i, j, g.get(0, j));
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for ((o, &p), &gv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = p * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(&g.row(i)[at..at + c]);
                    }
                    at += c;
                    self.accumulate(grads, p, d)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let d = Matrix::from_vec(r, c, g.data()[at * c..(at + r) * c].to_vec())?;
                    at += r;
                    self.accumulate(grads, p, d)?;
                }
            }
            Op::RepeatRows(a) => self.accumulate(grads, *a, column_sums(g))?,
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / r as f64;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let k = g.get(0, 0) / (r * c) as f64;
                self.accumulate(grads, *a, Matrix::filled(r, c, k))?;
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::RowDot(a, b) => {
                let (x, z) = (self.value(*a), self.value(*b));
                let mut da = z.clone();
                let mut db = x.clone();
                for r in 0..x.rows() {
                    let k = g.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    db.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::RowSumSq(a) => {
                let mut d = self.value(*a).clone();
                for r in 0..d.rows() {
                    let k = 2.0 * g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::BatchMatVec { mats, vecs } => {
                let (m, v) = (self.value(*mats), self.value(*vecs));
                let k_in = v.cols();
                let k_out = m.cols() / k_in;
                let mut dm = Matrix::zeros(m.rows(), m.cols());
                let mut dv = Matrix::zeros(v.rows(), v.cols());
                for b in 0..v.rows() {
                    for i in 0..k_out {
                        let gi = g.get(b, i);
                        for j in 0..k_in {
                            dm.set(b, i * k_in + j, gi * v.get(b, j));
                            let cur = dv.get(b, j);
                            dv.set(b, j, cur + m.get(b, i * k_in + j) * gi);
                        }
                    }
                }
                self.accumulate(grads, *mats, dm)?;
                self.accumulate(grads, *vecs, dv)?;
            }
            Op::LogisticLoss {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = self.shape(*logits);
                let scale = g.get(0, 0) / labels.len() as f64;
                let data = probs
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        // Inside the clamp the derivative of the log loss in the logit is p - y.
                        if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                            (p - y) * scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *logits, Matrix::from_vec(r, c, data)?)?;
            }
        }
        Ok(())
    }

    fn backprop_conv(
        &self,
        channels: &[Var],
        filters: Var,
        bias: Var,
        window: usize,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let chans: Vec<&Matrix> = channels.iter().map(|&c| self.value(c)).collect();
        let w = self.value(filters);
        let (n, d) = chans[0].shape();
        let c = chans.len();
        let positions = n - window + 1;
        let patch = window * c * d;
        let mut dw = Matrix::zeros(w.rows(), w.cols());
        let mut db = Matrix::zeros(1, w.rows());
        let mut dpatch = vec![0.0; patch];
        let mut dchans: Vec<Matrix> = (0..c).map(|_| Matrix::zeros(n, d)).collect();
        let mut buf = vec![0.0; patch];
        for i in 0..positions {
            ops::fill_patch(&chans, i, window, &mut buf);
            dpatch.iter_mut().for_each(|v| *v = 0.0);
            for f in 0..w.rows() {
                let gf = g.get(i, f);
                if gf == 0.0 {
                    continue;
                }
                db.data_mut()[f] += gf;
                for (dwv, x) in dw.row_mut(f).iter_mut().zip(&buf) {
                    *dwv += gf * x;
                }
                for (dp, wv) in dpatch.iter_mut().zip(w.row(f)) {
                    *dp += gf * wv;
                }
            }
            let mut at = 0;
            for j in 0..window {
                for dch in dchans.iter_mut() {
                    for (o, v) in dch.row_mut(i + j).iter_mut().zip(&dpatch[at..at + d]) {
                        *o += v;
                    }
                    at += d;
                }
            }
        }
        self.accumulate(grads, filters, dw)?;
        self.accumulate(grads, bias, db)?;
        for (&ch, dch) in channels.iter().zip(dchans) {
            self.accumulate(grads, ch, dch)?;
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
