// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-major `f64` arrays and the eager (untaped) primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer-norm variance regularizer.
pub const LN_EPS: f64 = 1e-5;

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub(crate) fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies a contiguous block of rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::Dimension("transpose needs a matrix".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`, skipping zero entries of `a`.
///
/// Skipping is exact: every skipped term would have added a signed zero.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix product. Both operands must be 2-D with agreeing inner dimension.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    gemm_acc(&a.data, &b.data, &mut out, n, k, m);
    Ok(DenseArray {
        shape: vec![n, m],
        data: out,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row: leave all weights at zero
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &DenseArray, axis: usize) -> Result<DenseArray> {
    if axis >= x.ndim() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} for rank {}",
            x.ndim()
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (t, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + t * inner];
            }
            softmax_in_place(&mut buf);
            for (t, b) in buf.iter().enumerate() {
                out.data[base + t * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Per-row normalization over the last axis followed by an affine map.
pub fn layer_norm(x: &DenseArray, gain: &DenseArray, bias: &DenseArray) -> Result<DenseArray> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Dimension(format!(
            "layer_norm gain/bias length {}/{} for width {c}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        normalize_row(row, gain.data(), bias.data());
    }
    Ok(out)
}

/// Normalizes `row` in place and returns `1/std`.
pub(crate) fn normalize_row(row: &mut [f64], gain: &[f64], bias: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
        *v = (*v - mean) * inv * g + b;
    }
    inv
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        assert_eq!(
            matmul(&m(&[&[1.0, 2.0]]), &m(&[&[3.0], &[4.0]])).unwrap().data(),
            &[11.0]
        );
        let z = DenseArray::zeros(&[2, 2]);
        assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            matmul(&b, &m(&[&[1.0, 2.0, 3.0]])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&DenseArray::vector(vec![0.0; 3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&DenseArray::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = softmax(&DenseArray::vector(vec![2f64.ln(), 0.0]), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = m(&[&[0.0, 5.0], &[0.0, 5.0]]);
        let s = softmax(&x, 0).unwrap();
        for v in s.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = DenseArray::vector(vec![1.0; 2]);
        let zeros = DenseArray::vector(vec![0.0; 2]);
        let out = layer_norm(&m(&[&[3.0, 3.0]]), &ones, &zeros).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = layer_norm(&m(&[&[1.0, -1.0]]), &ones, &zeros).unwrap();
        // variance 1 regularized by eps
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((out.data()[0] - expect).abs() < 1e-15);
        assert!((out.data()[1] + expect).abs() < 1e-15);
        let bias = DenseArray::vector(vec![0.5, -2.0]);
        let out = layer_norm(&m(&[&[7.0, -3.0]]), &zeros, &bias).unwrap();
        assert_eq!(out.data(), bias.data());
    }
}
