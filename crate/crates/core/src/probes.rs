// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear decoding of image-token grid coordinates from each layer.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{derive_seed, TokenGrid};
use crate::model::{assemble_input, ModelWeights, Prompt, Session};
use crate::numerics::{DenseArray, Tape};

pub const DEFAULT_EPOCHS: usize = 10;

/// Stored in every probe report.
pub const READ_POINT: &str = "projection: adapter output before positional embeddings; \
embedding: residual stream entering layer 0; residual_l: residual stream after layer l \
(the model has no final norm, so the raw stream is read)";

const BLOCK_ROWS: usize = 512;
const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    Projection,
    Embedding,
    Residual(usize),
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Projection => write!(f, "projection"),
            Self::Embedding => write!(f, "embedding"),
            Self::Residual(l) => write!(f, "residual_{l}"),
        }
    }
}

/// Every tag of a model, input side first.
pub fn all_tags(n_layers: usize) -> Vec<LayerTag> {
    let mut t = vec![LayerTag::Projection, LayerTag::Embedding];
    t.extend((0..n_layers).map(LayerTag::Residual));
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Column,
}

/// Labeled activations for one tag, stored in row blocks.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub tag: LayerTag,
    pub grid_size: usize,
    blocks: Vec<Rc<DenseArray>>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl ProbeDataset {
    pub fn new(tag: LayerTag, grid_size: usize, activations: &DenseArray, rows: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        let n = activations.rows();
        if rows.len() != n || cols.len() != n {
            return Err(Error::Dimension("labels and activations differ in length".into()));
        }
        if rows.iter().chain(&cols).any(|&v| v >= grid_size) {
            return Err(Error::Contract(format!("label outside grid of size {grid_size}")));
        }
        let blocks = (0..n)
            .step_by(BLOCK_ROWS)
            .map(|s| Rc::new(activations.slice_rows(s, (s + BLOCK_ROWS).min(n))))
            .collect();
        Ok(Self {
            tag,
            grid_size,
            blocks,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.cols())
    }

    pub fn labels(&self, axis: Axis) -> &[usize] {
        match axis {
            Axis::Row => &self.rows,
            Axis::Column => &self.cols,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.blocks[i / BLOCK_ROWS].row(i % BLOCK_ROWS)
    }

    /// Same activations with `(row, column)` label pairs permuted across samples.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
            cols: idx.iter().map(|&i| self.cols[i]).collect(),
            ..self.clone()
        }
    }

    /// A random subset of `n` samples, in their original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &i in &idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(
            self.tag,
            self.grid_size,
            &DenseArray::new(vec![idx.len(), self.dim()], data)?,
            idx.iter().map(|&i| self.rows[i]).collect(),
            idx.iter().map(|&i| self.cols[i]).collect(),
        )
    }
}

struct Builder {
    tag: LayerTag,
    data: Vec<f64>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

/// Image-token activations at each tag, labeled with the token's grid cell.
pub fn collect_activations(weights: &ModelWeights, grids: &[TokenGrid], tags: &[LayerTag]) -> Result<Vec<ProbeDataset>> {
    let g = weights.config.grid_size;
    let d = weights.config.d_model;
    for t in tags {
        if let LayerTag::Residual(l) = t {
            if *l >= weights.config.n_layers {
                return Err(Error::Contract(format!("no layer {l}")));
            }
        }
    }
    let mut builders: Vec<Builder> = tags
        .iter()
        .map(|&tag| Builder {
            tag,
            data: Vec::new(),
            rows: Vec::new(),
            cols: Vec::new(),
        })
        .collect();
    for grid in grids {
        let input = assemble_input(weights, grid, Prompt::list())?;
        let image = input.image_range.clone();
        let mut s = Session::new(weights, &[], true)?;
        s.extend(&input.embeddings.slice_rows(0, image.end))?;
        let trace = s.finish().expect("recorded");
        for b in &mut builders {
            let src = match b.tag {
                LayerTag::Projection => &trace.inputs,
                LayerTag::Embedding => &trace.embedding,
                LayerTag::Residual(l) => &trace.residuals[l],
            };
            for (cell, p) in image.clone().enumerate() {
                b.data.extend_from_slice(src.row(p));
                b.rows.push(cell / g);
                b.cols.push(cell % g);
            }
        }
    }
    builders
        .into_iter()
        .map(|b| {
            let n = b.rows.len();
            ProbeDataset::new(b.tag, g, &DenseArray::new(vec![n, d], b.data)?, b.rows, b.cols)
        })
        .collect()
}

/// A trained linear classifier `x·weight + bias` over grid coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub layer_tag: LayerTag,
    pub axis: Axis,
    /// `(d_model, G)`.
    pub weight: DenseArray,
    pub bias: Vec<f64>,
}

impl ProbeSpec {
    pub fn predict(&self, x: &[f64]) -> usize {
        let g = self.bias.len();
        let mut logits = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (k, l) in logits.iter_mut().enumerate() {
                    *l += xi * self.weight.data()[i * g + k];
                }
            }
        }
        crate::model::argmax(&logits)
    }

    pub fn correct(&self, data: &ProbeDataset) -> Vec<bool> {
        let labels = data.labels(self.axis);
        (0..data.len()).map(|i| self.predict(data.row(i)) == labels[i]).collect()
    }

    pub fn accuracy(&self, data: &ProbeDataset) -> f64 {
        let c = self.correct(data);
        c.iter().filter(|&&b| b).count() as f64 / c.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedProbe {
    pub spec: ProbeSpec,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

struct Standardizer {
    mean: DenseArray,
    inv_std: DenseArray,
}

impl Standardizer {
    fn fit(data: &ProbeDataset, g: usize) -> Result<Self> {
        let (n, d) = (data.len() as f64, data.dim());
        let mut mean = vec![0.0; d];
        for i in 0..data.len() {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..data.len() {
            for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let mut inv = Vec::with_capacity(d * g);
        for v in var {
            let s = if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 };
            inv.extend(std::iter::repeat_n(s, g));
        }
        Ok(Self {
            mean: DenseArray::new(vec![1, d], mean)?,
            inv_std: DenseArray::new(vec![d, g], inv)?,
        })
    }
}

/// Mean cross-entropy over `data` and, when asked, its gradient in the
/// standardized parameters `(v, b)`.
fn loss_and_grad(
    data: &ProbeDataset,
    axis: Axis,
    std: &Standardizer,
    v: &DenseArray,
    b: &DenseArray,
    want_grad: bool,
) -> Result<(f64, Option<(DenseArray, DenseArray)>)> {
    let labels = data.labels(axis);
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut gv = DenseArray::zeros(v.shape());
    let mut gb = DenseArray::zeros(b.shape());
    for (bi, block) in data.blocks.iter().enumerate() {
        let mut tape = Tape::new();
        let vv = tape.input(v.clone())?;
        let bv = tape.input(b.clone())?;
        let inv = tape.input(std.inv_std.clone())?;
        let mean = tape.input(std.mean.clone())?;
        let x = tape.input_shared(Rc::clone(block))?;
        let w = tape.mul(vv, inv)?;
        let shift = tape.matmul(mean, w)?;
        let bias = tape.sub(bv, shift)?;
        let xw = tape.matmul(x, w)?;
        let logits = tape.add_row(xw, bias)?;
        let lp = tape.log_softmax_rows(logits)?;
        let start = bi * BLOCK_ROWS;
        let picks: Vec<(usize, usize)> = (0..block.rows()).map(|r| (r, labels[start + r])).collect();
        let picked = tape.pick(lp, &picks)?;
        let total = tape.sum(picked)?;
        let scaled = tape.scale(total, -1.0 / n)?;
        loss += tape.value(scaled).data()[0];
        if want_grad {
            let mut grads = tape.backward(scaled)?;
            for (acc, g) in [(&mut gv, grads.take(vv)), (&mut gb, grads.take(bv))] {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
    }
    Ok((loss, want_grad.then_some((gv, gb))))
}

/// Multinomial logistic regression by full-batch gradient descent with an
/// Armijo backtracking step; `epochs` counts descent iterations.
pub fn train_probe(train: &ProbeDataset, test: &ProbeDataset, axis: Axis, epochs: usize, rng_seed: u64) -> Result<TrainedProbe> {
    let g = train.grid_size;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Training("probe needs non-empty train and test splits".into()));
    }
    if train.dim() != test.dim() || train.grid_size != test.grid_size {
        return Err(Error::Training("train and test splits disagree in shape".into()));
    }
    let labels = train.labels(axis);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Training("training labels contain a single class".into()));
    }
    let d = train.dim();
    let std = Standardizer::fit(train, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut v = DenseArray::new(vec![d, g], (0..d * g).map(|_| rng.gen_range(-1e-3..1e-3)).collect())?;
    let mut b = DenseArray::zeros(&[1, g]);
    let mut step = 1.0;
    let (mut loss, _) = loss_and_grad(train, axis, &std, &v, &b, false)?;
    for _ in 0..epochs {
        let (l0, grads) = loss_and_grad(train, axis, &std, &v, &b, true)?;
        let (gv, gb) = grads.expect("requested");
        let norm2: f64 = gv.data().iter().chain(gb.data()).map(|x| x * x).sum();
        if norm2 == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let nv = v.zip_map(&gv, |a, g| a - step * g)?;
            let nb = b.zip_map(&gb, |a, g| a - step * g)?;
            let (l1, _) = loss_and_grad(train, axis, &std, &nv, &nb, false)?;
            if l1.is_finite() && l1 <= l0 - ARMIJO_C * step * norm2 {
                v = nv;
                b = nb;
                loss = l1;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    // fold the standardization into the stored map
    let weight = v.zip_map(&std.inv_std, |a, s| a * s)?;
    let mut bias = b.data().to_vec();
    for (i, m) in std.mean.data().iter().enumerate() {
        for (k, bk) in bias.iter_mut().enumerate() {
            *bk -= m * weight.data()[i * g + k];
        }
    }
    let spec = ProbeSpec {
        layer_tag: train.tag,
        axis,
        weight,
        bias,
    };
    Ok(TrainedProbe {
        train_accuracy: spec.accuracy(train),
        test_accuracy: spec.accuracy(test),
        final_loss: loss,
        spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub tag: LayerTag,
    pub row_accuracy: f64,
    pub column_accuracy: f64,
    /// Both axes correct.
    pub joint_accuracy: f64,
    /// Joint accuracy per cell, index `row·G + column`.
    pub per_position: Vec<f64>,
}

pub fn probe_layer(train: &ProbeDataset, test: &ProbeDataset, epochs: usize, rng_seed: u64) -> Result<LayerProbe> {
    let row = train_probe(train, test, Axis::Row, epochs, derive_seed(rng_seed, 0))?;
    let col = train_probe(train, test, Axis::Column, epochs, derive_seed(rng_seed, 1))?;
    let (rc, cc) = (row.spec.correct(test), col.spec.correct(test));
    let g = test.grid_size;
    let mut hits = vec![0usize; g * g];
    let mut counts = vec![0usize; g * g];
    for i in 0..test.len() {
        let cell = test.rows[i] * g + test.cols[i];
        counts[cell] += 1;
        hits[cell] += usize::from(rc[i] && cc[i]);
    }
    let joint = hits.iter().sum::<usize>() as f64 / test.len() as f64;
    Ok(LayerProbe {
        tag: train.tag,
        row_accuracy: row.test_accuracy,
        column_accuracy: col.test_accuracy,
        joint_accuracy: joint,
        per_position: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub layers: Vec<LayerProbe>,
    /// Index into `layers` of the highest joint accuracy, earliest on ties.
    pub best: usize,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
    pub epochs: usize,
    pub seed: u64,
    pub read_point: String,
}

impl ProbeCurve {
    /// `G × G` joint accuracy at the best layer.
    pub fn heatmap(&self) -> Vec<Vec<f64>> {
        let pp = &self.layers[self.best].per_position;
        let g = (pp.len() as f64).sqrt().round() as usize;
        pp.chunks(g).map(<[f64]>::to_vec).collect()
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("layer_tag,axis,accuracy\n");
        for l in &self.layers {
            for (axis, acc) in [("row", l.row_accuracy), ("column", l.column_accuracy), ("joint", l.joint_accuracy)] {
                out.push_str(&format!("{},{axis},{acc}\n", l.tag));
            }
        }
        out
    }

    pub fn heatmap_csv(&self) -> String {
        self.heatmap()
            .iter()
            .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }
}

/// Trains one row and one column probe per tag.
pub fn probe_curve(
    weights: &ModelWeights,
    train: &[TokenGrid],
    test: &[TokenGrid],
    epochs: usize,
    seed: u64,
) -> Result<ProbeCurve> {
    let mut layers = Vec::new();
    for (i, tag) in all_tags(weights.config.n_layers).into_iter().enumerate() {
        let tr = collect_activations(weights, train, &[tag])?.remove(0);
        let te = collect_activations(weights, test, &[tag])?.remove(0);
        layers.push(probe_layer(&tr, &te, epochs, derive_seed(seed, i as u64))?);
    }
    let mut best = 0;
    for (i, l) in layers.iter().enumerate() {
        if l.joint_accuracy > layers[best].joint_accuracy {
            best = i;
        }
    }
    Ok(ProbeCurve {
        layers,
        best,
        n_train_scenes: train.len(),
        n_test_scenes: test.len(),
        epochs,
        seed,
        read_point: READ_POINT.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, g: usize) -> ProbeDataset {
        let mut data = Vec::new();
        let (mut rows, mut cols) = (Vec::new(), Vec::new());
        for i in 0..n {
            let (r, c) = (i % g, (i / g) % g);
            let mut x = vec![0.0; 2 * g];
            x[r] = 1.0;
            x[g + c] = 1.0;
            data.extend(x);
            rows.push(r);
            cols.push(c);
        }
        ProbeDataset::new(LayerTag::Embedding, g, &DenseArray::new(vec![n, 2 * g], data).unwrap(), rows, cols).unwrap()
    }

    #[test]
    fn one_hot_features_are_decoded() {
        let d = separable(1200, 4);
        let p = probe_layer(&d, &d, DEFAULT_EPOCHS, 1).unwrap();
        assert_eq!(p.joint_accuracy, 1.0);
        assert!(p.per_position.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn loss_decreases() {
        let d = separable(600, 4);
        let a = train_probe(&d, &d, Axis::Row, 1, 3).unwrap();
        let b = train_probe(&d, &d, Axis::Row, 5, 3).unwrap();
        assert!(b.final_loss < a.final_loss);
        assert!(a.final_loss < (4.0f64).ln());
    }

    #[test]
    fn single_class_is_an_error() {
        let mut d = separable(40, 4);
        d.rows = vec![2; 40];
        assert!(matches!(train_probe(&d, &d, Axis::Row, 2, 0), Err(Error::Training(_))));
    }
}
