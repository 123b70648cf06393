// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! Every operation appends a node holding its operands and forward value.
//! [`Tape::backward`] replays adjoints in reverse node order and consumes
//! the tape; any later use returns [`Error::TapeReuse`].

use std::rc::Rc;

use super::array::{gemm_acc, matmul, normalize_row, softmax_in_place, DenseArray};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: DenseArray,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<DenseArray>,
}

/// Recorder for differentiable computations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar output with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<Var>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> DenseArray {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => DenseArray::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> DenseArray {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| DenseArray::zeros(&self.shapes[v.0]))
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

fn same_shape(a: &DenseArray, b: &DenseArray, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<DenseArray>, g: DenseArray) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    fn check(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeReuse)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, value: DenseArray) -> Result<Var> {
        self.check()?;
        self.nodes.push(Node {
            op,
            value: Rc::new(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (a leaf whose gradient is reported).
    pub fn input(&mut self, value: DenseArray) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    /// Records a leaf backed by a shared array without copying it.
    pub fn input_shared(&mut self, value: Rc<DenseArray>) -> Result<Var> {
        self.check()?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    /// Adds a vector to every row of a matrix (per-row affine broadcast).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.len() != av.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {} vs width {}",
                bv.len(),
                av.cols()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        self.push(Op::AddRow(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(super::array::gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Op::LogSoftmaxRows(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension("layer_norm gain/bias width".into()));
        }
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let mut xhat = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xhat.rows());
        for r in 0..xhat.rows() {
            inv_std.push(normalize_row(xhat.row_mut(r), &ones, &zeros));
        }
        let (g, b) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(Op::Transpose(a), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 || start + width > av.cols() {
            return Err(Error::Dimension("slice_cols out of range".into()));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + width]);
        }
        let out = DenseArray::new(vec![rows, width], data)?;
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = DenseArray::new(vec![rows, width], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::Dimension("concat_rows column mismatch".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
            rows += self.value(*p).rows();
        }
        let out = DenseArray::new(vec![rows, cols], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Selects rows by index (embedding lookup, permutations).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.iter().any(|&i| i >= av.rows()) {
            return Err(Error::Dimension("gather_rows index out of range".into()));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let out = DenseArray::new(vec![idx.len(), c], data)?;
        self.push(Op::GatherRows(a, idx.to_vec()), out)
    }

    /// Picks matrix entries into a vector.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        if idx.iter().any(|&(i, j)| i >= av.rows() || j >= av.cols()) {
            return Err(Error::Dimension("pick index out of range".into()));
        }
        let out = DenseArray::vector(idx.iter().map(|&(i, j)| av.get2(i, j)).collect());
        self.push(Op::Pick(a, idx.to_vec()), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = DenseArray::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    /// Gradients of the scalar `output` with respect to every leaf.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        self.check()?;
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<DenseArray>> = (0..n).map(|_| None).collect();
        let out_shape = self.value(output).shape().to_vec();
        grads[output.0] = Some(DenseArray::filled(&out_shape, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (nn, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let bt = bv.transpose()?;
                    let mut ga = vec![0.0; nn * k];
                    gemm_acc(g.data(), bt.data(), &mut ga, nn, m, k);
                    let at = av.transpose()?;
                    let mut gb = vec![0.0; k * m];
                    gemm_acc(at.data(), g.data(), &mut gb, k, nn, m);
                    accumulate(&mut grads[a.0], DenseArray::new(vec![nn, k], ga)?);
                    accumulate(&mut grads[b.0], DenseArray::new(vec![k, m], gb)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
                    let gb = g.zip_map(&self.nodes[a.0].value, |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let bshape = self.nodes[b.0].value.shape().to_vec();
                    accumulate(&mut grads[b.0], DenseArray::new(bshape, gb)?);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], g.map(|v| v * s));
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(&self.nodes[a.0].value, |d, x| if x > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(&self.nodes[a.0].value, |d, x| d * super::array::gelu_grad(x))?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |d, y| d * y)?;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(g.row(r)).map(|(p, d)| p * d).sum();
                        for ((o, p), d) in ga.row_mut(r).iter_mut().zip(yr).zip(g.row(r)) {
                            *o = p * (d - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, ly), d) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = d - ly.exp() * total;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.nodes[gain.0].value.data();
                    let c = xhat.cols();
                    let mut gx = DenseArray::zeros(xhat.shape());
                    let mut gg = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for r in 0..xhat.rows() {
                        let xh = xhat.row(r);
                        let gr = g.row(r);
                        let mut dxhat = vec![0.0; c];
                        for j in 0..c {
                            gg[j] += gr[j] * xh[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    let gshape = self.nodes[gain.0].value.shape().to_vec();
                    let bshape = self.nodes[bias.0].value.shape().to_vec();
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gain.0], DenseArray::new(gshape, gg)?);
                    accumulate(&mut grads[bias.0], DenseArray::new(bshape, gbias)?);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], g.transpose()?);
                }
                Op::SliceCols(a, start) => {
                    let av = &self.nodes[a.0].value;
                    let mut ga = DenseArray::zeros(av.shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        let w = shape[1];
                        let mut gp = DenseArray::zeros(&shape);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        let rows = self.nodes[p.0].value.rows();
                        let gp = g.slice_rows(row, row + rows).reshape(shape)?;
                        row += rows;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = DenseArray::zeros(self.nodes[a.0].value.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Pick(a, idx) => {
                    let mut ga = DenseArray::zeros(self.nodes[a.0].value.shape());
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        let cur = ga.get2(i, j);
                        ga.set2(i, j, cur + g.data()[k]);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads[a.0], DenseArray::filled(&shape, g.data()[0]));
                }
            }
        }

        let leaves: Vec<Var> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // only leaf gradients are meaningful once the sweep is done
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            leaves,
        })
    }
}
