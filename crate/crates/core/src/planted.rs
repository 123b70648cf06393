// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built reference model whose localization circuit is known exactly.
//!
//! The residual stream is partitioned into named subspaces. Attention heads
//! and MLPs read and write those subspaces only:
//!
//! * layer 0 MLP turns signature content into smoothly clamped class indicators,
//! * layer 1 MLP multiplies each indicator with the cell's coordinates,
//! * a helper head copies the queried class token to later positions,
//! * the identification head matches that class against image content; its
//!   value output carries the matched indicator mass, read both as presence by
//!   the yes/no step and as the query gain of the coordinate heads,
//! * an inventory head averages indicators over the image for the list task,
//! * four coordinate heads select the extremal matching cell along ∓x, ∓y and
//!   return the gated coordinate together with its indicator mass,
//! * four step heads copy each coordinate into a readout slot at its answer
//!   step, a tracker removes already listed classes,
//! * the last MLP gates the list readout; the unembedding decodes a slot
//!   `(v, m)` as `c·(2k·v − k²·m)`, maximal at `k = round(v / m)`.
//!
//! Gains stay moderate so that attention transitions along a straight
//! path from the mean image to a scene stay wide enough for 64-step
//! integrated gradients to be complete to well under one percent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::World;
use crate::model::{
    task_tokens, CorpusManifest, ModelConfig, ModelWeights, Prompt, VisualAdapter, Vocab, SYSTEM_LEN,
};
use crate::numerics::DenseArray;

/// Extremal-attention error target used to pick the default temperature.
pub const TEMPERATURE_TOLERANCE: f64 = 1e-6;

const HELPER_GAIN: f64 = 60.0;
const ID_GAIN: f64 = 16.0;
const ID_SINK: f64 = 12.0;
const RAMP_LOW: f64 = 0.2;
const RAMP_HIGH: f64 = 0.3;
/// Curvature of the GELU clamp that builds class indicators; kept mild so
/// gradients along interpolation paths stay smooth.
const RAMP_SHARPNESS: f64 = 6.0;
/// Pre-activation scale for MLP units that must act as exact gates.
const GATE_SHARPNESS: f64 = 16.0;
const LOC_MARGIN: f64 = 20.0;
const LOC_SINK: f64 = 6.0;
const NONVIS_PENALTY: f64 = 100.0;
const COORD_TILT: f64 = 1.5;
const TEMPLATE_LOGIT: f64 = 30.0;
const STEP_LOGIT: f64 = 30.0;
const COORD_CURVATURE: f64 = 4.0;
const YES_GAIN: f64 = 20.0;
const LIST_LOGIT: f64 = 60.0;
const LIST_EOS_LOGIT: f64 = 35.0;
const TRACKER_GAIN: f64 = 8.0;
const INVENTORY_SLOPE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocHead {
    pub label: String,
    pub head: HeadId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitManifest {
    /// x_min, y_min, x_max, y_max in that order.
    pub loc_heads: Vec<LocHead>,
    pub cls_head: HeadId,
    /// Layer whose heads move coordinates to the answer steps.
    pub aggregation_layer: usize,
    pub helper_head: HeadId,
    pub inventory_head: HeadId,
    pub step_heads: Vec<HeadId>,
    pub tracker_head: HeadId,
    pub temperature: f64,
    /// Upper bound on the coordinate error of one extremal head at this temperature.
    pub temperature_error_bound: f64,
    /// Largest per-dimension noise for which object indicators stay exact (4σ).
    pub noise_bound: f64,
}

impl CircuitManifest {
    pub fn loc_head_ids(&self) -> Vec<HeadId> {
        self.loc_heads.iter().map(|h| h.head).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PlantParams {
    /// `None` picks the smallest power of two meeting [`TEMPERATURE_TOLERANCE`].
    pub temperature: Option<f64>,
    pub corpus: CorpusManifest,
}


/// Coordinate error bound `G·Σ_{d≥1} d·e^{−T·d}` for an extremal head.
pub fn extremal_error_bound(grid_size: usize, temperature: f64) -> f64 {
    let g = grid_size as f64;
    (1..grid_size).map(|d| d as f64 * (-temperature * d as f64).exp()).sum::<f64>() * g
}

/// Smallest power of two whose extremal error bound is below the tolerance.
pub fn default_temperature(grid_size: usize) -> f64 {
    let mut t = 1.0;
    while extremal_error_bound(grid_size, t) >= TEMPERATURE_TOLERANCE {
        t *= 2.0;
    }
    t
}

/// Residual-stream subspace offsets.
#[derive(Debug, Clone)]
struct Layout {
    bias: usize,
    sink: usize,
    nonvis: usize,
    xone: usize,
    yone: usize,
    content: usize,
    texture: usize,
    ind: usize,
    tok_class: usize,
    class_flag: usize,
    assist_flag: usize,
    cq: usize,
    idout: usize,
    pres: usize,
    gx: usize,
    gy: usize,
    slot: usize,
    mslot: usize,
    cur: usize,
    curm: usize,
    inv: usize,
    b0: usize,
    b1: usize,
    steps: usize,
    list: usize,
    listout: usize,
    width: usize,
}

const TEXTURE_DIMS: usize = 2;

impl Layout {
    fn new(g: usize, c: usize) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let at = next;
            next += n;
            at
        };
        let bias = take(1);
        let sink = take(1);
        let nonvis = take(1);
        let xone = take(g);
        let yone = take(g);
        let content = take(c);
        let texture = take(TEXTURE_DIMS);
        let ind = take(c);
        let tok_class = take(c);
        let class_flag = take(1);
        let assist_flag = take(1);
        let cq = take(c);
        let idout = take(c);
        let pres = take(1);
        let gx = take(c);
        let gy = take(c);
        let slot = take(4);
        let mslot = take(4);
        let cur = take(1);
        let curm = take(1);
        let inv = take(c);
        let b0 = take(1);
        let b1 = take(1);
        let steps = take(10);
        let list = take(1);
        let listout = take(c);
        Self {
            bias,
            sink,
            nonvis,
            xone,
            yone,
            content,
            texture,
            ind,
            tok_class,
            class_flag,
            assist_flag,
            cq,
            idout,
            pres,
            gx,
            gy,
            slot,
            mslot,
            cur,
            curm,
            inv,
            b0,
            b1,
            steps,
            list,
            listout,
            width: next,
        }
    }
}

/// Position of `ASSISTANT:` for each prompt kind.
#[derive(Debug, Clone, Copy)]
struct AnswerStarts {
    binary: usize,
    localize: usize,
    list: usize,
}

fn answer_starts(vocab: &Vocab) -> Result<AnswerStarts> {
    let g = vocab.grid_size();
    let at = |p: Prompt| -> Result<usize> { Ok(SYSTEM_LEN + g * g + task_tokens(vocab, p)?.len() - 1) };
    Ok(AnswerStarts {
        binary: at(Prompt::binary(0))?,
        localize: at(Prompt::localize(0))?,
        list: at(Prompt::list())?,
    })
}

fn construction(msg: impl Into<String>) -> Error {
    Error::Construction(msg.into())
}

/// Builds the planted weights and the manifest naming its heads.
pub fn plant_model(config: &ModelConfig, world: &World, params: &PlantParams) -> Result<(ModelWeights, CircuitManifest)> {
    config.validate()?;
    let (g, c) = (config.grid_size, config.num_classes);
    if world.grid_size() != g || world.num_classes() != c || world.params.d_vis != config.d_vis {
        return Err(construction("world and model disagree on grid, classes or d_vis"));
    }
    if config.n_layers < 8 {
        return Err(construction(format!("need at least 8 layers, got {}", config.n_layers)));
    }
    if config.n_heads < 5 {
        return Err(construction(format!("need at least 5 heads per layer, got {}", config.n_heads)));
    }
    let dh = config.d_head();
    if dh < c + 1 {
        return Err(construction(format!("d_head {dh} must exceed the class count {c}")));
    }
    if config.d_vis < c + TEXTURE_DIMS {
        return Err(construction("d_vis too small for signatures and texture"));
    }
    let lay = Layout::new(g, c);
    if lay.width > config.d_model {
        return Err(construction(format!(
            "residual layout needs {} dimensions, d_model is {}",
            lay.width, config.d_model
        )));
    }
    let bits = usize::BITS as usize - (g - 1).leading_zeros() as usize;
    let m_units = (2 * c * bits).max(2 * c);
    if config.d_mlp < m_units {
        return Err(construction(format!("d_mlp must be at least {m_units}")));
    }
    let vocab = config.vocab();
    let starts = answer_starts(&vocab)?;
    let list_end = starts.list + c + 1;
    if list_end > config.max_seq {
        return Err(construction(format!("max_seq {} cannot hold a full list answer", config.max_seq)));
    }
    let binary_span = starts.binary..starts.binary + 2;
    let loc_span = starts.localize..starts.localize + 10;
    if binary_span.end > loc_span.start || loc_span.end > starts.list {
        return Err(construction("answer regions of the prompt kinds overlap"));
    }

    let temperature = params.temperature.unwrap_or_else(|| default_temperature(g));
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(construction("temperature must be positive"));
    }

    // adapter: signatures into CONTENT, first complement directions into TEXTURE
    let mut proj = DenseArray::zeros(&[config.d_vis, config.d_model]);
    for (k, sig) in world.bank.signatures().iter().enumerate() {
        for (i, &s) in sig.iter().enumerate() {
            proj.set2(i, lay.content + k, s);
        }
    }
    for (k, b) in world.bank.complement().iter().take(TEXTURE_DIMS).enumerate() {
        for (i, &s) in b.iter().enumerate() {
            proj.set2(i, lay.texture + k, s);
        }
    }
    let adapter = VisualAdapter::new(proj, world, params.corpus)?;
    let mut w = ModelWeights::zeros(config, adapter);

    // embeddings
    for k in 0..c {
        let t = vocab.class(k);
        w.token_embedding.set2(t, lay.tok_class + k, 1.0);
        w.token_embedding.set2(t, lay.class_flag, 1.0);
    }
    w.token_embedding.set2(vocab.assistant(), lay.assist_flag, 1.0);
    let image = SYSTEM_LEN..SYSTEM_LEN + g * g;
    for p in 0..config.max_seq {
        let pe = &mut w.positional_embedding;
        pe.set2(p, lay.bias, 1.0);
        if p == 0 {
            pe.set2(p, lay.sink, 1.0);
        }
        if image.contains(&p) {
            let cell = p - image.start;
            pe.set2(p, lay.xone + cell % g, 1.0);
            pe.set2(p, lay.yone + cell / g, 1.0);
        } else {
            pe.set2(p, lay.nonvis, 1.0);
        }
        if p == starts.binary {
            pe.set2(p, lay.b0, 1.0);
        }
        if p == starts.binary + 1 {
            pe.set2(p, lay.b1, 1.0);
        }
        if loc_span.contains(&p) {
            pe.set2(p, lay.steps + (p - starts.localize), 1.0);
        }
        if p >= starts.list {
            pe.set2(p, lay.list, 1.0);
        }
    }

    // queries are pre-multiplied by sqrt(d_head) to cancel the score scale
    let qs = (dh as f64).sqrt();
    let h_last = config.n_heads - 1;

    // layer 0: smooth clamped indicators from signature content
    {
        let l0 = &mut w.layers[0];
        let slope = RAMP_SHARPNESS / (RAMP_HIGH - RAMP_LOW);
        for k in 0..c {
            for (u, shift, sign) in [(2 * k, 0.0, 1.0), (2 * k + 1, RAMP_SHARPNESS, -1.0)] {
                l0.w1.set2(lay.content + k, u, slope);
                l0.b1.data_mut()[u] = -slope * RAMP_LOW - shift;
                l0.w2.set2(u, lay.ind + k, sign / RAMP_SHARPNESS);
            }
        }
    }

    // layer 1: indicator-gated coordinates, built bit by bit
    {
        let l1 = &mut w.layers[1];
        let mut u = 0;
        for k in 0..c {
            for (axis, out) in [(lay.xone, lay.gx), (lay.yone, lay.gy)] {
                for bit in 0..bits {
                    l1.w1.set2(lay.ind + k, u, GATE_SHARPNESS);
                    for x in (0..g).filter(|x| x >> bit & 1 == 1) {
                        l1.w1.set2(axis + x, u, GATE_SHARPNESS);
                    }
                    l1.b1.data_mut()[u] = -GATE_SHARPNESS;
                    l1.w2.set2(u, out + k, (1 << bit) as f64 / GATE_SHARPNESS);
                    u += 1;
                }
            }
        }
    }

    // layer 3: helper copies the class token forward; the sink absorbs earlier queries
    let helper = HeadId::new(3, h_last);
    {
        let lw = &mut w.layers[helper.layer];
        lw.wq[helper.head].set2(lay.bias, 0, qs * HELPER_GAIN);
        lw.wk[helper.head].set2(lay.class_flag, 0, 1.0);
        lw.wk[helper.head].set2(lay.sink, 0, 0.5);
        for k in 0..c {
            lw.wv[helper.head].set2(lay.tok_class + k, k, 1.0);
            lw.wo[helper.head].set2(k, lay.cq + k, 1.0);
        }
    }

    // layer 4: identification and inventory
    let cls = HeadId::new(4, h_last);
    let inventory = HeadId::new(4, h_last - 1);
    {
        let lw = &mut w.layers[4];
        for k in 0..c {
            lw.wq[cls.head].set2(lay.cq + k, k, qs * ID_GAIN);
            lw.wk[cls.head].set2(lay.content + k, k, 1.0);
            lw.wv[cls.head].set2(lay.ind + k, k, 1.0);
            lw.wv[cls.head].set2(lay.ind + k, c, 1.0);
            lw.wo[cls.head].set2(k, lay.idout + k, 1.0);
        }
        lw.wq[cls.head].set2(lay.bias, c, qs * ID_SINK);
        lw.wk[cls.head].set2(lay.sink, c, 1.0);
        lw.wo[cls.head].set2(c, lay.pres, 1.0);

        lw.wq[inventory.head].set2(lay.bias, 0, qs * HELPER_GAIN);
        lw.wk[inventory.head].set2(lay.nonvis, 0, -1.0);
        for k in 0..c {
            lw.wv[inventory.head].set2(lay.ind + k, k, 1.0);
            lw.wo[inventory.head].set2(k, lay.inv + k, 1.0);
        }
    }

    // layer 5: extremal coordinate heads. Scores are gated by the matched
    // indicator, so unmatched cells sit at zero and the sink slightly above.
    // Values carry the gated coordinate and the indicator mass; their ratio
    // is the extremal coordinate.
    let top = (g - 1) as f64;
    let labels = ["x_min", "y_min", "x_max", "y_max"];
    let mut loc_heads = Vec::with_capacity(4);
    for (j, label) in labels.iter().enumerate() {
        let hid = HeadId::new(5, config.n_heads - 4 + j);
        let lw = &mut w.layers[5];
        let gated = if j % 2 == 0 { lay.gx } else { lay.gy };
        for k in 0..c {
            lw.wq[hid.head].set2(lay.idout + k, k, qs);
            if j < 2 {
                lw.wk[hid.head].set2(lay.ind + k, k, LOC_MARGIN + temperature * top);
                lw.wk[hid.head].set2(gated + k, k, -temperature);
            } else {
                lw.wk[hid.head].set2(lay.ind + k, k, LOC_MARGIN);
                lw.wk[hid.head].set2(gated + k, k, temperature);
            }
            lw.wv[hid.head].set2(gated + k, 0, 1.0);
            lw.wv[hid.head].set2(lay.ind + k, 1, 1.0);
        }
        lw.wq[hid.head].set2(lay.bias, c, qs);
        lw.wk[hid.head].set2(lay.sink, c, NONVIS_PENALTY + LOC_SINK);
        lw.wk[hid.head].set2(lay.nonvis, c, -NONVIS_PENALTY);
        lw.wo[hid.head].set2(0, lay.slot + j, 1.0);
        lw.wo[hid.head].set2(1, lay.mslot + j, 1.0);
        loc_heads.push(LocHead {
            label: label.to_string(),
            head: hid,
        });
    }

    // layer 6: step heads move slot j to its answer step; tracker for the list
    let mut step_heads = Vec::with_capacity(4);
    for j in 0..4 {
        let hid = HeadId::new(6, config.n_heads - 4 + j);
        let lw = &mut w.layers[6];
        lw.wq[hid.head].set2(lay.steps + 2 * j + 1, 0, qs * HELPER_GAIN);
        lw.wk[hid.head].set2(lay.assist_flag, 0, 1.0);
        lw.wq[hid.head].set2(lay.bias, 1, qs * HELPER_GAIN);
        lw.wk[hid.head].set2(lay.sink, 1, 0.5);
        lw.wv[hid.head].set2(lay.slot + j, 0, 1.0);
        lw.wv[hid.head].set2(lay.mslot + j, 1, 1.0);
        lw.wo[hid.head].set2(0, lay.cur, 1.0);
        lw.wo[hid.head].set2(1, lay.curm, 1.0);
        step_heads.push(hid);
    }
    let tracker = HeadId::new(6, config.n_heads - 5);
    {
        let lw = &mut w.layers[6];
        lw.wq[tracker.head].set2(lay.bias, 0, qs * HELPER_GAIN);
        lw.wk[tracker.head].set2(lay.list, 0, 1.0);
        lw.wk[tracker.head].set2(lay.sink, 0, 0.5);
        for k in 0..c {
            lw.wv[tracker.head].set2(lay.tok_class + k, k, 1.0);
            lw.wo[tracker.head].set2(k, lay.inv + k, -TRACKER_GAIN);
        }
    }

    // layer 7 MLP: clamped list readout, active on list steps only
    {
        let lw = &mut w.layers[7];
        let s = GATE_SHARPNESS;
        let gate = 2.0 * INVENTORY_SLOPE;
        let threshold = 0.5 / (g * g) as f64;
        for k in 0..c {
            for (u, extra, sign) in [(2 * k, 0.0, 1.0), (2 * k + 1, 1.0, -1.0)] {
                lw.w1.set2(lay.inv + k, u, s * INVENTORY_SLOPE);
                lw.w1.set2(lay.list, u, s * gate);
                lw.b1.data_mut()[u] = -s * (INVENTORY_SLOPE * threshold + gate + extra);
                lw.w2.set2(u, lay.listout + k, sign / s);
            }
        }
    }

    // unembedding
    {
        let u = &mut w.unembedding;
        for k in 0..g {
            let t = vocab.coord(k);
            let kf = k as f64;
            u.set2(lay.curm, t, -COORD_CURVATURE * kf * kf);
            u.set2(lay.cur, t, 2.0 * COORD_CURVATURE * kf);
            u.set2(lay.bias, t, -COORD_TILT * kf);
            for s in [1, 3, 5, 7] {
                u.set2(lay.steps + s, t, STEP_LOGIT);
            }
        }
        u.set2(lay.pres, vocab.yes(), YES_GAIN);
        u.set2(lay.b0, vocab.no(), YES_GAIN * 0.5);
        u.set2(lay.b1, vocab.eos(), TEMPLATE_LOGIT);
        u.set2(lay.steps, vocab.lbracket(), TEMPLATE_LOGIT);
        for s in [2, 4, 6] {
            u.set2(lay.steps + s, vocab.comma(), TEMPLATE_LOGIT);
        }
        u.set2(lay.steps + 8, vocab.rbracket(), TEMPLATE_LOGIT);
        u.set2(lay.steps + 9, vocab.eos(), TEMPLATE_LOGIT);
        u.set2(lay.list, vocab.eos(), LIST_EOS_LOGIT);
        for k in 0..c {
            u.set2(lay.listout + k, vocab.class(k), LIST_LOGIT);
            u.set2(lay.bias, vocab.class(k), -(k as f64));
        }
    }

    w.validate()?;
    let manifest = CircuitManifest {
        loc_heads,
        cls_head: cls,
        aggregation_layer: 6,
        helper_head: helper,
        inventory_head: inventory,
        step_heads,
        tracker_head: tracker,
        temperature,
        temperature_error_bound: extremal_error_bound(g, temperature),
        noise_bound: (1.0 - RAMP_HIGH).min(RAMP_LOW) / 4.0,
    };
    Ok((w, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_temperature_is_sixteen_on_an_eight_grid() {
        assert_eq!(default_temperature(8), 16.0);
        assert!(extremal_error_bound(8, 16.0) < TEMPERATURE_TOLERANCE);
        assert!(extremal_error_bound(8, 8.0) >= TEMPERATURE_TOLERANCE);
    }

    #[test]
    fn layout_fits_default_width() {
        let lay = Layout::new(8, 10);
        assert!(lay.width <= ModelConfig::default().d_model);
    }
}
