// SPDX-License-Identifier: MIT OR Apache-2.0

//! Eager forward pass, greedy decoding and teacher-forced scoring.

use std::sync::Arc;

use super::intervention::InterventionPlan;
use super::{InterventionSpec, ModelInput, ModelWeights};
use crate::error::{Error, Result};
use crate::numerics::{gelu, gemm_acc, normalize_row, softmax_in_place, DenseArray};

/// Everything a recorded forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Pre-positional rows after embedding interventions, `(n, d_model)`.
    pub inputs: DenseArray,
    /// Residual stream entering layer 0, `(n, d_model)`.
    pub embedding: DenseArray,
    /// `[layer][head]`, each `(n, d_head)`, before the output projection.
    pub head_outputs: Vec<Vec<DenseArray>>,
    /// Residual stream after each layer, `(n, d_model)`.
    pub residuals: Vec<DenseArray>,
    /// `[layer][head]`, each `(n, n)`; row `i` is the distribution over keys `0..=i`.
    pub attention: Vec<Vec<DenseArray>>,
    pub logits: DenseArray,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(n, vocab)`.
    pub logits: DenseArray,
    pub trace: Option<ForwardTrace>,
}

#[derive(Debug, Clone, Copy)]
struct HeadFlags {
    qk_zero: bool,
    v_zero: bool,
    o_zero: bool,
}

fn all_zero(a: &DenseArray) -> bool {
    a.data().iter().all(|&v| v == 0.0)
}

#[derive(Debug, Clone, Default)]
struct TraceBuilder {
    inputs: Vec<f64>,
    embedding: Vec<f64>,
    heads: Vec<Vec<Vec<f64>>>,
    residuals: Vec<Vec<f64>>,
    attention: Vec<Vec<Vec<Vec<f64>>>>,
    logits: Vec<f64>,
}

/// Incremental forward state: rows may be fed in several chunks, each
/// attending to everything fed before it.
#[derive(Debug, Clone)]
pub struct Session<'w> {
    weights: &'w ModelWeights,
    plan: Arc<InterventionPlan>,
    flags: Arc<Vec<Vec<HeadFlags>>>,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
    trace: Option<TraceBuilder>,
}

impl<'w> Session<'w> {
    pub fn new(weights: &'w ModelWeights, interventions: &[InterventionSpec], record: bool) -> Result<Self> {
        let plan = InterventionPlan::new(&weights.config, interventions)?;
        Ok(Self::with_plan(weights, Arc::new(plan), record))
    }

    pub fn with_plan(weights: &'w ModelWeights, plan: Arc<InterventionPlan>, record: bool) -> Self {
        let c = &weights.config;
        let flags = weights
            .layers
            .iter()
            .map(|lw| {
                (0..c.n_heads)
                    .map(|h| HeadFlags {
                        qk_zero: all_zero(&lw.wq[h]) || all_zero(&lw.wk[h]),
                        v_zero: all_zero(&lw.wv[h]),
                        o_zero: all_zero(&lw.wo[h]),
                    })
                    .collect()
            })
            .collect();
        let empty = || vec![vec![Vec::new(); c.n_heads]; c.n_layers];
        let trace = record.then(|| TraceBuilder {
            heads: empty(),
            residuals: vec![Vec::new(); c.n_layers],
            attention: vec![vec![Vec::new(); c.n_heads]; c.n_layers],
            ..TraceBuilder::default()
        });
        Self {
            weights,
            plan,
            flags: Arc::new(flags),
            keys: empty(),
            values: empty(),
            len: 0,
            trace,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds pre-positional rows and returns their logits.
    pub fn extend(&mut self, rows: &DenseArray) -> Result<DenseArray> {
        let w = self.weights;
        let c = &w.config;
        let (d, dh, nh) = (c.d_model, c.d_head(), c.n_heads);
        if rows.ndim() != 2 || rows.cols() != d {
            return Err(Error::Dimension(format!("input rows {:?}, expected (_, {d})", rows.shape())));
        }
        let n = rows.rows();
        let start = self.len;
        if start + n > c.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {} exceeds max_seq {}",
                start + n,
                c.max_seq
            )));
        }
        let mut inputs = rows.clone();
        self.plan.apply_embeddings(&mut inputs, start)?;
        let mut x = inputs.data().to_vec();
        for (i, xr) in x.chunks_mut(d).enumerate() {
            xr.iter_mut()
                .zip(w.positional_embedding.row(start + i))
                .for_each(|(a, b)| *a += b);
        }
        if let Some(t) = &mut self.trace {
            t.inputs.extend_from_slice(inputs.data());
            t.embedding.extend_from_slice(&x);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let total = start + n;
        let mut q = vec![0.0; n * dh];
        let mut k = vec![0.0; n * dh];
        let mut v = vec![0.0; n * dh];
        let mut scores = vec![0.0; total];
        for (l, lw) in w.layers.iter().enumerate() {
            let h = if c.layer_norm {
                let mut h = x.clone();
                h.chunks_mut(d)
                    .for_each(|r| {
                        normalize_row(r, lw.ln1_gain.data(), lw.ln1_bias.data());
                    });
                h
            } else {
                x.clone()
            };
            let mut attn_out = vec![0.0; n * d];
            let blocked_any = !self.plan.blocks[l].is_empty();
            for hd in 0..nh {
                let f = self.flags[l][hd];
                if !f.qk_zero {
                    q.iter_mut().for_each(|e| *e = 0.0);
                    k.iter_mut().for_each(|e| *e = 0.0);
                    gemm_acc(&h, lw.wq[hd].data(), &mut q, n, d, dh);
                    gemm_acc(&h, lw.wk[hd].data(), &mut k, n, d, dh);
                    self.keys[l][hd].extend_from_slice(&k);
                }
                if !f.v_zero {
                    v.iter_mut().for_each(|e| *e = 0.0);
                    gemm_acc(&h, lw.wv[hd].data(), &mut v, n, d, dh);
                    self.values[l][hd].extend_from_slice(&v);
                }
                let mut z = vec![0.0; n * dh];
                let ops = self.plan.heads.get(&(l, hd));
                for i in 0..n {
                    let p = start + i;
                    let row = &mut scores[..=p];
                    if f.qk_zero {
                        row.iter_mut().for_each(|s| *s = 0.0);
                    } else {
                        let qi = &q[i * dh..(i + 1) * dh];
                        let keys = &self.keys[l][hd];
                        for (j, s) in row.iter_mut().enumerate() {
                            let kj = &keys[j * dh..(j + 1) * dh];
                            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        }
                    }
                    if blocked_any {
                        for (j, s) in row.iter_mut().enumerate() {
                            if self.plan.blocked(l, p, j) {
                                *s = f64::NEG_INFINITY;
                            }
                        }
                    }
                    softmax_in_place(row);
                    let zi = &mut z[i * dh..(i + 1) * dh];
                    if !f.v_zero {
                        let vals = &self.values[l][hd];
                        for (j, &a) in row.iter().enumerate() {
                            if a != 0.0 {
                                let vj = &vals[j * dh..(j + 1) * dh];
                                zi.iter_mut().zip(vj).for_each(|(o, b)| *o += a * b);
                            }
                        }
                    }
                    if let Some(ops) = ops {
                        if let Some(patch) = ops.patch.get(&p) {
                            zi.copy_from_slice(patch);
                        } else if ops.is_zeroed(p) {
                            zi.iter_mut().for_each(|e| *e = 0.0);
                        }
                    }
                    if let Some(t) = &mut self.trace {
                        t.attention[l][hd].push(row.to_vec());
                    }
                }
                if !f.o_zero {
                    gemm_acc(&z, lw.wo[hd].data(), &mut attn_out, n, dh, d);
                }
                if let Some(t) = &mut self.trace {
                    t.heads[l][hd].extend_from_slice(&z);
                }
            }
            x.iter_mut().zip(&attn_out).for_each(|(a, b)| *a += b);

            let h2 = if c.layer_norm {
                let mut h2 = x.clone();
                h2.chunks_mut(d)
                    .for_each(|r| {
                        normalize_row(r, lw.ln2_gain.data(), lw.ln2_bias.data());
                    });
                h2
            } else {
                x.clone()
            };
            let m = c.d_mlp;
            let mut hidden = vec![0.0; n * m];
            gemm_acc(&h2, lw.w1.data(), &mut hidden, n, d, m);
            for r in hidden.chunks_mut(m) {
                r.iter_mut().zip(lw.b1.data()).for_each(|(a, b)| *a = gelu(*a + b));
            }
            let mut mlp = vec![0.0; n * d];
            gemm_acc(&hidden, lw.w2.data(), &mut mlp, n, m, d);
            for (xr, mr) in x.chunks_mut(d).zip(mlp.chunks(d)) {
                for ((a, b), bias) in xr.iter_mut().zip(mr).zip(lw.b2.data()) {
                    *a += b + bias;
                }
            }
            if let Some(t) = &mut self.trace {
                t.residuals[l].extend_from_slice(&x);
            }
        }
        if c.layer_norm {
            x.chunks_mut(d)
                .for_each(|r| {
                        normalize_row(r, w.final_gain.data(), w.final_bias.data());
                    });
        }
        let vsize = w.unembedding.cols();
        let mut logits = vec![0.0; n * vsize];
        gemm_acc(&x, w.unembedding.data(), &mut logits, n, d, vsize);
        if let Some(t) = &mut self.trace {
            t.logits.extend_from_slice(&logits);
        }
        self.len = total;
        DenseArray::new(vec![n, vsize], logits)
    }

    /// Greedy continuation from `logits` (the last fed row) until `<eos>` or budget.
    pub fn generate(&mut self, logits: &[f64], max_new_tokens: usize) -> Result<Vec<usize>> {
        let w = self.weights;
        let eos = w.vocab().eos();
        let mut out = Vec::new();
        let mut current = logits.to_vec();
        while out.len() < max_new_tokens {
            let t = argmax(&current);
            out.push(t);
            if t == eos || out.len() == max_new_tokens || self.len >= w.config.max_seq {
                break;
            }
            let row = DenseArray::new(vec![1, w.config.d_model], w.token_embedding.row(t).to_vec())?;
            current = self.extend(&row)?.into_data();
        }
        Ok(out)
    }

    pub fn finish(self) -> Option<ForwardTrace> {
        let c = &self.weights.config;
        let n = self.len;
        let t = self.trace?;
        let mat = |data: Vec<f64>, cols: usize| DenseArray::new(vec![n, cols], data).expect("trace rows");
        let square = |rows: Vec<Vec<f64>>| {
            let mut data = vec![0.0; n * n];
            for (i, r) in rows.iter().enumerate() {
                data[i * n..i * n + r.len()].copy_from_slice(r);
            }
            DenseArray::new(vec![n, n], data).expect("square trace")
        };
        Some(ForwardTrace {
            inputs: mat(t.inputs, c.d_model),
            embedding: mat(t.embedding, c.d_model),
            head_outputs: t
                .heads
                .into_iter()
                .map(|hs| hs.into_iter().map(|z| mat(z, c.d_head())).collect())
                .collect(),
            residuals: t.residuals.into_iter().map(|r| mat(r, c.d_model)).collect(),
            attention: t
                .attention
                .into_iter()
                .map(|hs| hs.into_iter().map(square).collect())
                .collect(),
            logits: mat(t.logits, self.weights.unembedding.cols()),
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn forward(
    weights: &ModelWeights,
    input: &ModelInput,
    interventions: &[InterventionSpec],
    record: bool,
) -> Result<ForwardOutput> {
    let mut s = Session::new(weights, interventions, record)?;
    let logits = s.extend(&input.embeddings)?;
    Ok(ForwardOutput {
        logits,
        trace: s.finish(),
    })
}

pub fn generate(weights: &ModelWeights, input: &ModelInput, max_new_tokens: usize) -> Result<Vec<usize>> {
    generate_with(weights, input, &[], max_new_tokens)
}

pub fn generate_with(
    weights: &ModelWeights,
    input: &ModelInput,
    interventions: &[InterventionSpec],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    if input.is_empty() {
        return Err(Error::EmptyInput("no input rows".into()));
    }
    let mut s = Session::new(weights, interventions, false)?;
    let logits = s.extend(&input.embeddings)?;
    let last = logits.row(logits.rows() - 1).to_vec();
    s.generate(&last, max_new_tokens)
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

/// Mean negative log-likelihood of `reference` over unmasked positions.
///
/// Row `first_row + k` of `logits` predicts `reference[k]`.
pub fn teacher_forced_nll(logits: &DenseArray, first_row: usize, reference: &[usize], template_mask: &[bool]) -> Result<f64> {
    if reference.len() != template_mask.len() {
        return Err(Error::Dimension("reference and template mask lengths differ".into()));
    }
    if first_row + reference.len() > logits.rows() {
        return Err(Error::Dimension("logits do not cover the reference".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, (&t, &masked)) in reference.iter().zip(template_mask).enumerate() {
        if !masked {
            total -= log_softmax_at(logits.row(first_row + k), t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySupport("every answer position is masked".into()));
    }
    Ok(total / count as f64)
}

pub fn teacher_forced_perplexity(
    weights: &ModelWeights,
    input: &ModelInput,
    reference: &[usize],
    template_mask: &[bool],
    interventions: &[InterventionSpec],
) -> Result<f64> {
    if reference.len() != template_mask.len() {
        return Err(Error::Dimension("reference and template mask lengths differ".into()));
    }
    if template_mask.iter().all(|&m| m) {
        return Err(Error::EmptySupport("every answer position is masked".into()));
    }
    let full = input.extended(weights, &reference[..reference.len() - 1])?;
    let out = forward(weights, &full, interventions, false)?;
    Ok(teacher_forced_nll(&out.logits, input.len() - 1, reference, template_mask)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn nll_closed_forms() {
        // uniform rows give ln V
        let v = 7;
        let logits = DenseArray::zeros(&[3, v]);
        let nll = teacher_forced_nll(&logits, 0, &[1, 2, 3], &[false, true, false]).unwrap();
        assert!((nll.exp() - v as f64).abs() < 1e-12);
        // certain predictions give perplexity 1
        let mut data = vec![-1e4; 2 * v];
        data[4] = 1e4;
        data[v + 5] = 1e4;
        let logits = DenseArray::new(vec![2, v], data).unwrap();
        let nll = teacher_forced_nll(&logits, 0, &[4, 5], &[false, false]).unwrap();
        assert_eq!(nll.exp(), 1.0);
        assert!(matches!(
            teacher_forced_nll(&logits, 0, &[4, 5], &[true, true]),
            Err(Error::EmptySupport(_))
        ));
    }
}
