use std::collections::HashMap;

use rand::Rng;

use super::tensor::masked_softmax;
use super::{Gradients, NumError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalarVar(Var, Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<Option<usize>>),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    MaskedSoftmax(Var, Vec<bool>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    CrossEntropy(Var, usize),
    CrossEntropyLogits(Var, Option<Vec<bool>>, usize),
    BceLogits(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass so that [`Tape::backward`] can replay it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    empty_softmax_rows: usize,
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

    pub fn scalar(&self, v: Var) -> Result<f64, NumError> {
        self.value(v).item()
    }

    /// Number of all-masked softmax rows seen so far (each produced a zero row).
    pub fn empty_softmax_rows(&self) -> usize {
        self.empty_softmax_rows
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.push(value, Op::Input, "constant")
    }

    /// Leaf for a parameter. Repeated calls for one id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same(y, name)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(NumError::ShapeMismatch {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// `a * s` for a `1 x 1` variable `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let sv = self.value(s);
        if sv.shape() != [1, 1] {
            return Err(NumError::ShapeMismatch {
                op: "mul_scalar_var",
                left: self.value(a).shape(),
                right: sv.shape(),
            });
        }
        let k = sv.data()[0];
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::MulScalarVar(a, s), "mul_scalar_var")
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NumError> {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push(out, Op::Affine(a, scale), "affine")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumError> {
        self.affine(a, factor, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape(),
                    right: t.shape(),
                });
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape(),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(NumError::InvalidArgument(format!(
                "slice_cols {start}..{end} out of range for shape {:?}",
                x.shape()
            )));
        }
        let mut out = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(NumError::InvalidArgument(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                x.shape()
            )));
        }
        let data = x.data()[start * x.cols()..end * x.cols()].to_vec();
        let out = Tensor::from_vec(end - start, x.cols(), data)?;
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Embedding lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(NumError::InvalidArgument(format!(
                    "gather_rows index {id} out of range for shape {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(ids.len(), t.cols(), data)?;
        self.push(out, Op::GatherRows(table, ids.to_vec()), "gather_rows")
    }

    /// Builds a `rows x cols` matrix whose entries are picked from the flat
    /// storage of `src`; `None` entries are 0.
    pub fn gather_elems(
        &mut self,
        src: Var,
        index: Vec<Option<usize>>,
        rows: usize,
        cols: usize,
    ) -> Result<Var, NumError> {
        let s = self.value(src);
        if index.len() != rows * cols {
            return Err(NumError::InvalidArgument(format!(
                "gather_elems needs {} indices, got {}",
                rows * cols,
                index.len()
            )));
        }
        let mut data = Vec::with_capacity(index.len());
        for ix in &index {
            match ix {
                Some(i) if *i < s.len() => data.push(s.data()[*i]),
                Some(i) => {
                    return Err(NumError::InvalidArgument(format!(
                        "gather_elems index {i} out of range for shape {:?}",
                        s.shape()
                    )))
                }
                None => data.push(0.0),
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push(out, Op::GatherElems(src, index), "gather_elems")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a), "ln")
    }

    /// Row-wise softmax over allowed slots; see [`super::masked_softmax`].
    pub fn masked_softmax(&mut self, logits: Var, mask: Vec<bool>) -> Result<Var, NumError> {
        let (out, empty) = masked_softmax(self.value(logits), &mask)?;
        self.empty_softmax_rows += empty.iter().filter(|&&e| e).count();
        self.push(out, Op::MaskedSoftmax(logits, mask), "masked_softmax")
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var, NumError> {
        let n = self.value(logits).len();
        self.masked_softmax(logits, vec![true; n])
    }

    /// Inverted dropout. `p == 0` records nothing and returns `a`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, NumError> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(NumError::InvalidArgument(format!("dropout p={p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data)?;
        self.push(out, Op::Dropout(a, mask), "dropout")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    /// `-ln(probs[target])` for a `1 x n` probability row.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var, NumError> {
        let p = self.value(probs);
        if p.rows() != 1 || target >= p.cols() {
            return Err(NumError::InvalidArgument(format!(
                "cross_entropy target {target} invalid for shape {:?}",
                p.shape()
            )));
        }
        let out = Tensor::scalar(-p.data()[target].ln());
        self.push(out, Op::CrossEntropy(probs, target), "cross_entropy")
    }

    /// `-log_softmax(logits)[target]` over the allowed slots of an optional mask.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        mask: Option<Vec<bool>>,
        target: usize,
    ) -> Result<Var, NumError> {
        let x = self.value(logits);
        if x.rows() != 1 || target >= x.cols() {
            return Err(NumError::InvalidArgument(format!(
                "cross_entropy_logits target {target} invalid for shape {:?}",
                x.shape()
            )));
        }
        let allowed = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        if mask.as_ref().is_some_and(|m| m.len() != x.cols()) {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy_logits",
                left: x.shape(),
                right: [1, mask.as_ref().map_or(0, Vec::len)],
            });
        }
        if !allowed(target) {
            return Err(NumError::InvalidArgument(format!(
                "cross_entropy_logits target {target} is masked"
            )));
        }
        let max = (0..x.cols())
            .filter(|&i| allowed(i))
            .map(|i| x.data()[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..x.cols())
                .filter(|&i| allowed(i))
                .map(|i| (x.data()[i] - max).exp())
                .sum::<f64>()
                .ln();
        let out = Tensor::scalar(lse - x.data()[target]);
        self.push(out, Op::CrossEntropyLogits(logits, mask, target), "cross_entropy_logits")
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`, computed stably.
    pub fn bce_logits(&mut self, logit: Var, label: f64) -> Result<Var, NumError> {
        let x = self.value(logit).item()?;
        let loss = x.max(0.0) - x * label + (-x.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceLogits(logit, label), "bce_logits")
    }

    /// Reverse pass from a scalar `loss`; returns a dense gradient per parameter.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(NumError::NotScalar { shape: lv.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |p, q| p * q);
                    let gb = elementwise(&g, self.value(*a), |p, q| p * q);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::MulScalarVar(a, s) => {
                    let k = self.value(*s).data()[0];
                    let gs: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(p, q)| p * q)
                        .sum();
                    accumulate(&mut grads, *s, Tensor::scalar(gs))?;
                    accumulate(&mut grads, *a, g.map(|v| v * k))?;
                }
                Op::Affine(a, scale) => {
                    let s = *scale;
                    accumulate(&mut grads, *a, g.map(|v| v * s))?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, gp)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let gp = Tensor::from_vec(
                            self.value(p).rows(),
                            g.cols(),
                            g.data()[offset..offset + n].to_vec(),
                        )?;
                        offset += n;
                        accumulate(&mut grads, p, gp)?;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows(), src.cols());
                    let off = start * src.cols();
                    ga.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::GatherRows(table, ids) => {
                    let src = self.value(*table);
                    let mut gt = Tensor::zeros(src.rows(), src.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::GatherElems(src, index) => {
                    let s = self.value(*src);
                    let mut gs = Tensor::zeros(s.rows(), s.cols());
                    for (k, ix) in index.iter().enumerate() {
                        if let Some(i) = ix {
                            gs.data_mut()[*i] += g.data()[k];
                        }
                    }
                    accumulate(&mut grads, *src, gs)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Relu(a) => {
                    let ga = elementwise(&g, self.value(*a), |p, x| if x > 0.0 { p } else { 0.0 });
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |p, y| p * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |p, y| p * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Ln(a) => {
                    let ga = elementwise(&g, self.value(*a), |p, x| p / x);
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let cols = y.cols();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            if mask[r * cols + c] {
                                *o = yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Dropout(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(p, m)| p * m).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data)?)?;
                }
                Op::Sum(a) => {
                    let s = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(s.rows(), s.cols(), g.data()[0]))?;
                }
                Op::CrossEntropy(probs, target) => {
                    let p = self.value(*probs);
                    let mut gp = Tensor::zeros(1, p.cols());
                    gp.data_mut()[*target] = -g.data()[0] / p.data()[*target];
                    accumulate(&mut grads, *probs, gp)?;
                }
                Op::CrossEntropyLogits(logits, mask, target) => {
                    let x = self.value(*logits);
                    let m = mask.clone().unwrap_or_else(|| vec![true; x.cols()]);
                    let (p, _) = masked_softmax(x, &m)?;
                    let mut gx = p.map(|v| v * g.data()[0]);
                    gx.data_mut()[*target] -= g.data()[0];
                    accumulate(&mut grads, *logits, gx)?;
                }
                Op::BceLogits(logit, label) => {
                    let x = self.value(*logit).data()[0];
                    let gx = (sigmoid(x) - label) * g.data()[0];
                    accumulate(&mut grads, *logit, Tensor::scalar(gx))?;
                }
            }
        }

        let mut out = store.zero_grads();
        for (&id, &var) in &self.params {
            if let Some(g) = &grads[var.0] {
                out.get_mut(id).add_assign(g)?;
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<(), NumError> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(n.to_string(), v.clone(), Init::Zeros).unwrap();
        }
        s
    }

    #[test]
    fn square_derivative() {
        let store = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, store.id("x").unwrap());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(tape.scalar(y).unwrap(), 9.0);
        assert_eq!(g.get(store.id("x").unwrap()).data(), &[6.0]);
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero() {
        let store = store_with(&[("x", Tensor::scalar(2.0)), ("unused", Tensor::row_vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, store.id("x").unwrap());
        let _ = tape.param(&store, store.id("unused").unwrap());
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y, &store).unwrap();
        assert_eq!(g.get(store.id("unused").unwrap()).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(v, &store), Err(NumError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(tape.ln(v), Err(NumError::NonFinite { op: "ln" })));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(3, 2)).unwrap();
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn dropout_zero_is_identity_and_scaling_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(1, 1000, 1.0)).unwrap();
        assert_eq!(tape.dropout(a, 0.0, &mut rng).unwrap(), a);
        let d = tape.dropout(a, 0.2, &mut rng).unwrap();
        for &v in tape.value(d).data() {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_logits_matches_direct_formula() {
        let mut tape = Tape::new();
        for (x, y) in [(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0)] {
            let v = tape.constant(Tensor::scalar(x)).unwrap();
            let l = tape.bce_logits(v, y).unwrap();
            let s = sigmoid(x);
            let direct = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            assert!((tape.scalar(l).unwrap() - direct).abs() < 1e-12);
        }
    }
}
