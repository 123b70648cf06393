// SPDX-License-Identifier: MIT OR Apache-2.0

//! Differentiable forward pass mirroring the eager one.

use super::intervention::InterventionPlan;
use super::{ModelInput, ModelWeights};
use crate::error::Result;
use crate::numerics::{DenseArray, Tape, Var};

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Vec<Var>,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape leaves for every weight array except the visual adapter.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub token_embedding: Var,
    pub positional_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub unembedding: Var,
}

impl WeightVars {
    pub fn record(tape: &mut Tape, w: &ModelWeights) -> Result<Self> {
        let mut leaf = |a: &DenseArray| tape.input(a.clone());
        let token_embedding = leaf(&w.token_embedding)?;
        let positional_embedding = leaf(&w.positional_embedding)?;
        let mut layers = Vec::with_capacity(w.layers.len());
        for lw in &w.layers {
            let ln1_gain = leaf(&lw.ln1_gain)?;
            let ln1_bias = leaf(&lw.ln1_bias)?;
            let wq = lw.wq.iter().map(&mut leaf).collect::<Result<Vec<_>>>()?;
            let wk = lw.wk.iter().map(&mut leaf).collect::<Result<Vec<_>>>()?;
            let wv = lw.wv.iter().map(&mut leaf).collect::<Result<Vec<_>>>()?;
            let wo = lw.wo.iter().map(&mut leaf).collect::<Result<Vec<_>>>()?;
            layers.push(LayerVars {
                ln1_gain,
                ln1_bias,
                wq,
                wk,
                wv,
                wo,
                ln2_gain: leaf(&lw.ln2_gain)?,
                ln2_bias: leaf(&lw.ln2_bias)?,
                w1: leaf(&lw.w1)?,
                b1: leaf(&lw.b1)?,
                w2: leaf(&lw.w2)?,
                b2: leaf(&lw.b2)?,
            });
        }
        Ok(Self {
            token_embedding,
            positional_embedding,
            layers,
            final_gain: leaf(&w.final_gain)?,
            final_bias: leaf(&w.final_bias)?,
            unembedding: leaf(&w.unembedding)?,
        })
    }

    /// Leaves in the same order as the weights' named arrays.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.positional_embedding];
        for l in &self.layers {
            out.extend([l.ln1_gain, l.ln1_bias]);
            for g in [&l.wq, &l.wk, &l.wv, &l.wo] {
                out.extend(g.iter().copied());
            }
            out.extend([l.ln2_gain, l.ln2_bias, l.w1, l.b1, l.w2, l.b2]);
        }
        out.extend([self.final_gain, self.final_bias, self.unembedding]);
        out
    }
}

/// Pre-positional rows: token rows gathered from the embedding table and
/// image rows taken from `visual` (or the input's own projected rows).
pub fn embed_taped(tape: &mut Tape, wv: &WeightVars, input: &ModelInput, visual: Option<Var>) -> Result<Var> {
    let r = input.image_range.clone();
    let mut parts = Vec::with_capacity(3);
    if r.start > 0 {
        parts.push(tape.gather_rows(wv.token_embedding, &input.tokens[..r.start])?);
    }
    let img = match visual {
        Some(v) => v,
        None => tape.input(input.embeddings.slice_rows(r.start, r.end))?,
    };
    parts.push(img);
    if r.end < input.len() {
        parts.push(tape.gather_rows(wv.token_embedding, &input.tokens[r.end..])?);
    }
    tape.concat_rows(&parts)
}

fn all_zero(a: &DenseArray) -> bool {
    a.data().iter().all(|&v| v == 0.0)
}

/// Returns `(n, vocab)` logits for pre-positional `rows`.
///
/// With `skip_inert`, heads and MLPs whose output is identically zero are
/// left off the tape; gradients with respect to inputs are unchanged but
/// their weights receive no gradient.
pub fn forward_taped(
    tape: &mut Tape,
    wv: &WeightVars,
    w: &ModelWeights,
    rows: Var,
    plan: &InterventionPlan,
    skip_inert: bool,
) -> Result<Var> {
    let c = &w.config;
    let (d, dh) = (c.d_model, c.d_head());
    let n = tape.value(rows).rows();

    let mut x = rows;
    if plan.replace.range(0..n).next().is_some() {
        let mut keep = DenseArray::filled(&[n, d], 1.0);
        let mut fill = DenseArray::zeros(&[n, d]);
        for (&p, v) in plan.replace.range(0..n) {
            keep.row_mut(p).iter_mut().for_each(|k| *k = 0.0);
            fill.row_mut(p).copy_from_slice(v);
        }
        let (keep, fill) = (tape.input(keep)?, tape.input(fill)?);
        x = tape.mul(x, keep)?;
        x = tape.add(x, fill)?;
    }
    for (positions, perm) in &plan.shuffles {
        let mut idx: Vec<usize> = (0..n).collect();
        for (i, &p) in positions.iter().enumerate() {
            idx[p] = positions[perm[i]];
        }
        x = tape.gather_rows(x, &idx)?;
    }
    let pos_idx: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(wv.positional_embedding, &pos_idx)?;
    x = tape.add(x, pos)?;

    let scale = 1.0 / (dh as f64).sqrt();
    for (l, lv) in wv.layers.iter().enumerate() {
        let h = if c.layer_norm {
            tape.layer_norm(x, lv.ln1_gain, lv.ln1_bias)?
        } else {
            x
        };
        let mut mask = DenseArray::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if j > i || plan.blocked(l, i, j) {
                    mask.set2(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let mask = tape.input(mask)?;
        let mut attn: Option<Var> = None;
        let lw = &w.layers[l];
        for hd in 0..c.n_heads {
            if skip_inert
                && !plan.heads.contains_key(&(l, hd))
                && (all_zero(&lw.wv[hd]) || all_zero(&lw.wo[hd]))
            {
                continue;
            }
            let q = tape.matmul(h, lv.wq[hd])?;
            let k = tape.matmul(h, lv.wk[hd])?;
            let v = tape.matmul(h, lv.wv[hd])?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let s = tape.scale(s, scale)?;
            let s = tape.add(s, mask)?;
            let a = tape.softmax_rows(s)?;
            let mut z = tape.matmul(a, v)?;
            if let Some(ops) = plan.heads.get(&(l, hd)) {
                let mut keep = DenseArray::filled(&[n, dh], 1.0);
                let mut fill = DenseArray::zeros(&[n, dh]);
                for p in 0..n {
                    if let Some(row) = ops.patch.get(&p) {
                        keep.row_mut(p).iter_mut().for_each(|k| *k = 0.0);
                        fill.row_mut(p).copy_from_slice(row);
                    } else if ops.is_zeroed(p) {
                        keep.row_mut(p).iter_mut().for_each(|k| *k = 0.0);
                    }
                }
                let (keep, fill) = (tape.input(keep)?, tape.input(fill)?);
                z = tape.mul(z, keep)?;
                z = tape.add(z, fill)?;
            }
            let o = tape.matmul(z, lv.wo[hd])?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, o)?,
                None => o,
            });
        }
        if let Some(a) = attn {
            x = tape.add(x, a)?;
        }
        if skip_inert && all_zero(&lw.w2) && all_zero(&lw.b2) {
            continue;
        }
        let h2 = if c.layer_norm {
            tape.layer_norm(x, lv.ln2_gain, lv.ln2_bias)?
        } else {
            x
        };
        let hidden = tape.matmul(h2, lv.w1)?;
        let hidden = tape.add_row(hidden, lv.b1)?;
        let hidden = tape.gelu(hidden)?;
        let out = tape.matmul(hidden, lv.w2)?;
        let out = tape.add_row(out, lv.b2)?;
        x = tape.add(x, out)?;
    }
    if c.layer_norm {
        x = tape.layer_norm(x, wv.final_gain, wv.final_bias)?;
    }
    tape.matmul(x, wv.unembedding)
}
