//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every node is appended after its inputs, so node order is a topological
//! order and the backward sweep walks the record in reverse.

use std::collections::HashMap;

use super::ops::{self, add_row_in_place, im2col, layer_norm_stats};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        bias: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskedNll {
        logits: Var,
        targets: Vec<(usize, usize)>,
        scale: f64,
    },
    SumSquares(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut y = self.value(a).clone();
        for (x, z) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= z;
        }
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if !mv.is_matrix() || bv.rank() != 1 || bv.len() != mv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", mv.shape(), bv.shape()),
            ));
        }
        let mut y = mv.clone();
        add_row_in_place(&mut y, bv.data());
        Ok(self.push(y, Op::AddRow(m, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|x| x * c);
        self.push(y, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(a))?;
        Ok(self.push(y, Op::Softmax(a)))
    }

    /// Softmax with a lower-triangular visibility mask.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let y = ops::causal_softmax_rows(self.value(a), 0)?;
        Ok(self.push(y, Op::CausalSoftmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let y = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let (xhat, rstd) = layer_norm_stats(self.value(x));
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(ops::gelu);
        self.push(y, Op::Gelu(a))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        let y = ops::conv1d(self.value(x), self.value(w), self.value(bias), stride)?;
        Ok(self.push(y, Op::Conv1d { x, w, stride, bias }))
    }

    /// Row lookup into a table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() || ids.is_empty() {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidId {
                id: bad,
                size: t.rows(),
            });
        }
        let rows: Vec<&[f64]> = ids.iter().map(|&i| t.row(i)).collect();
        let y = Tensor::from_rows(&rows)?;
        Ok(self.push(
            y,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&values)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| !self.value(p).is_matrix() || self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let y = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, n: usize) -> Result<Var> {
        let y = self.value(x).slice_rows(start, n)?;
        Ok(self.push(y, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() || n == 0 || start + n > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + n, xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * n);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + n]);
        }
        let y = Tensor::new(vec![xv.rows(), n], data)?;
        Ok(self.push(y, Op::SliceCols { x, start }))
    }

    /// `scale · Σ −log softmax(logits[row])[target]` over `(row, target)` pairs.
    pub fn masked_nll(
        &mut self,
        logits: Var,
        targets: &[(usize, usize)],
        scale: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.is_matrix() {
            return Err(Error::shape("masked_nll", format!("{:?}", lv.shape())));
        }
        let mut total = 0.0;
        for &(row, target) in targets {
            if row >= lv.rows() {
                return Err(Error::shape("masked_nll", format!("row {row} of {}", lv.rows())));
            }
            if target >= lv.cols() {
                return Err(Error::InvalidId {
                    id: target,
                    size: lv.cols(),
                });
            }
            total -= ops::log_softmax(lv.row(row))[target];
        }
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                scale,
            },
        ))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sq_norm());
        self.push(y, Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// Gradients of a scalar `loss` with respect to every parameter in
    /// `store`. Parameters the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Vec<Tensor>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if matches!(self.nodes[loss.0].op, Op::Constant) {
            return Err(Error::NotAttached);
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        let mut out = store.zeros_like();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let slot = &mut out[id.0];
                    if slot.shape() != g.shape() {
                        return Err(Error::shape(
                            "backward",
                            format!("parameter {} changed shape", store.name(*id)),
                        ));
                    }
                    slot.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let da = ops::matmul_nt(&g, self.value(*b))?;
                    let db = ops::matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = ops::matmul(&g, self.value(*b))?;
                    let db = ops::matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    let mut db = g;
                    for (x, y) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(m, bias) => {
                    accumulate(&mut grads, *bias, column_sums(&g));
                    accumulate(&mut grads, *m, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    // dX = Y ⊙ (dY − rowsum(dY ⊙ Y)); masked entries have Y = 0.
                    let y = &node.value;
                    let mut dx = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let dot: f64 = dx.row(i).iter().zip(yr).map(|(d, p)| d * p).sum();
                        for (d, p) in dx.row_mut(i).iter_mut().zip(yr) {
                            *d = p * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let n = xhat.cols();
                    let mut dgain = vec![0.0; n];
                    let mut dx = Tensor::zeros(xhat.shape());
                    let mut dxhat = vec![0.0; n];
                    for i in 0..xhat.rows() {
                        let (gr, xr) = (g.row(i), xhat.row(i));
                        for j in 0..n {
                            dgain[j] += gr[j] * xr[j];
                            dxhat[j] = gr[j] * gv.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx: f64 =
                            dxhat.iter().zip(xr).map(|(d, v)| d * v).sum::<f64>() / n as f64;
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            *out = rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *bias, column_sums(&g));
                    accumulate(&mut grads, *gain, Tensor::vector(dgain));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(a) => {
                    let mut dx = g;
                    for (d, x) in dx.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= ops::gelu_grad(*x);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Conv1d { x, w, stride, bias } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (k, d_in, d_out) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let cols = im2col(xv, k, *stride);
                    let w_mat = Tensor::new(vec![k * d_in, d_out], wv.data().to_vec())?;
                    let dw = ops::matmul_tn(&cols, &g)?.reshape(wv.shape())?;
                    let dcols = ops::matmul_nt(&g, &w_mat)?;
                    let mut dx = Tensor::zeros(xv.shape());
                    let width = k * d_in;
                    for p in 0..dcols.rows() {
                        let start = p * stride * d_in;
                        for (dst, src) in dx.data_mut()[start..start + width]
                            .iter_mut()
                            .zip(dcols.row(p))
                        {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads, *bias, column_sums(&g));
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { table, ids } => {
                    let mut dt = Tensor::zeros(self.shape(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        for (dst, src) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(start, n)?);
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        let mut data = Vec::with_capacity(g.rows() * n);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[start..start + n]);
                        }
                        accumulate(&mut grads, p, Tensor::new(vec![g.rows(), n], data)?);
                        start += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let c = g.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let n = g.cols();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..start + n].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedNll {
                    logits,
                    targets,
                    scale,
                } => {
                    let lv = self.value(*logits);
                    let upstream = g.data()[0] * scale;
                    let mut dl = Tensor::zeros(lv.shape());
                    for &(row, target) in targets {
                        let probs = ops::softmax_rows(&lv.slice_rows(row, 1)?)?;
                        let dst = dl.row_mut(row);
                        for (d, p) in dst.iter_mut().zip(probs.data()) {
                            *d += upstream * p;
                        }
                        dst[target] -= upstream;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, self.value(*a).map(|x| 2.0 * x * s));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.shape(*a), s));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Tensor::vector(out)
}
