// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hookable decoder-only transformer over `[system | image | task]` inputs.

mod checkpoint;
mod forward;
mod intervention;
mod prompt;
mod taped;
mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::World;
use crate::numerics::{matmul, DenseArray};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    argmax, forward, generate, generate_with, teacher_forced_nll, teacher_forced_perplexity, ForwardOutput, ForwardTrace,
    Session,
};
pub use intervention::{InterventionPlan, InterventionSpec, PositionSet};
pub use prompt::{assemble_input, reference_answer, task_tokens, ModelInput, Prompt, PromptKind, SYSTEM_LEN};
pub use taped::{embed_taped, forward_taped, WeightVars};
pub use vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    pub grid_size: usize,
    pub num_classes: usize,
    pub d_vis: usize,
    /// Pre-norm blocks and a final norm when set; the planted model runs without.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_model: 144,
            d_mlp: 128,
            max_seq: 112,
            grid_size: 8,
            num_classes: 10,
            d_vis: 32,
            layer_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.grid_size, self.num_classes)
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return bad("model sizes must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.grid_size == 0 || self.num_classes == 0 || self.d_vis == 0 {
            return bad("grid_size, num_classes and d_vis must be positive");
        }
        if self.max_seq < SYSTEM_LEN + self.grid_size * self.grid_size + 1 {
            return bad("max_seq cannot hold the image");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: DenseArray,
    pub ln1_bias: DenseArray,
    /// Per head, `(d_model, d_head)`.
    pub wq: Vec<DenseArray>,
    pub wk: Vec<DenseArray>,
    pub wv: Vec<DenseArray>,
    /// Per head, `(d_head, d_model)`.
    pub wo: Vec<DenseArray>,
    pub ln2_gain: DenseArray,
    pub ln2_bias: DenseArray,
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
}

impl LayerWeights {
    pub fn zeros(c: &ModelConfig) -> Self {
        let (d, dh, m, h) = (c.d_model, c.d_head(), c.d_mlp, c.n_heads);
        Self {
            ln1_gain: DenseArray::filled(&[d], 1.0),
            ln1_bias: DenseArray::zeros(&[d]),
            wq: vec![DenseArray::zeros(&[d, dh]); h],
            wk: vec![DenseArray::zeros(&[d, dh]); h],
            wv: vec![DenseArray::zeros(&[d, dh]); h],
            wo: vec![DenseArray::zeros(&[dh, d]); h],
            ln2_gain: DenseArray::filled(&[d], 1.0),
            ln2_bias: DenseArray::zeros(&[d]),
            w1: DenseArray::zeros(&[d, m]),
            b1: DenseArray::zeros(&[m]),
            w2: DenseArray::zeros(&[m, d]),
            b2: DenseArray::zeros(&[d]),
        }
    }

    /// Every array with a stable name, in checkpoint order.
    pub(crate) fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![
            ("ln1_gain".to_string(), &self.ln1_gain),
            ("ln1_bias".to_string(), &self.ln1_bias),
        ];
        for (tag, group) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            out.extend(group.iter().enumerate().map(|(h, a)| (format!("{tag}.{h}"), a)));
        }
        out.extend([
            ("ln2_gain".to_string(), &self.ln2_gain),
            ("ln2_bias".to_string(), &self.ln2_bias),
            ("w1".to_string(), &self.w1),
            ("b1".to_string(), &self.b1),
            ("w2".to_string(), &self.w2),
            ("b2".to_string(), &self.b2),
        ]);
        out
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut out = vec![
            ("ln1_gain".to_string(), &mut self.ln1_gain),
            ("ln1_bias".to_string(), &mut self.ln1_bias),
        ];
        for (tag, group) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ] {
            out.extend(group.iter_mut().enumerate().map(|(h, a)| (format!("{tag}.{h}"), a)));
        }
        out.extend([
            ("ln2_gain".to_string(), &mut self.ln2_gain),
            ("ln2_bias".to_string(), &mut self.ln2_bias),
            ("w1".to_string(), &mut self.w1),
            ("b1".to_string(), &mut self.b1),
            ("w2".to_string(), &mut self.w2),
            ("b2".to_string(), &mut self.b2),
        ]);
        out
    }
}

/// Seeded description of the corpus the mean visual embedding is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub scenes: usize,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self { seed: 7, scenes: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualAdapter {
    /// `(d_vis, d_model)`.
    pub projection: DenseArray,
    /// `(d_model)`, average projected visual token over the reference corpus.
    pub mean_embedding: DenseArray,
    pub corpus: CorpusManifest,
}

impl VisualAdapter {
    /// Builds the adapter and averages projected tokens over the seeded corpus.
    pub fn new(projection: DenseArray, world: &World, corpus: CorpusManifest) -> Result<Self> {
        let mean_embedding = Self::corpus_mean(&projection, world, corpus)?;
        Ok(Self {
            projection,
            mean_embedding,
            corpus,
        })
    }

    pub fn corpus_mean(projection: &DenseArray, world: &World, corpus: CorpusManifest) -> Result<DenseArray> {
        if corpus.scenes == 0 {
            return Err(Error::EmptyInput("reference corpus has no scenes".into()));
        }
        let d = projection.cols();
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for i in 0..corpus.scenes as u64 {
            let seed = corpus.seed.wrapping_mul(1_000_003).wrapping_add(i);
            let scene = world.generate_scene(seed)?;
            let grid = world.render_tokens(&scene, seed);
            let proj = self::project(projection, &grid.embeddings)?;
            for r in 0..proj.rows() {
                sum.iter_mut().zip(proj.row(r)).for_each(|(s, v)| *s += v);
            }
            count += proj.rows();
        }
        Ok(DenseArray::vector(sum.into_iter().map(|s| s / count as f64).collect()))
    }

    pub fn project(&self, visual: &DenseArray) -> Result<DenseArray> {
        project(&self.projection, visual)
    }
}

fn project(projection: &DenseArray, visual: &DenseArray) -> Result<DenseArray> {
    matmul(visual, projection)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `(vocab, d_model)`.
    pub token_embedding: DenseArray,
    /// `(max_seq, d_model)`.
    pub positional_embedding: DenseArray,
    pub layers: Vec<LayerWeights>,
    pub final_gain: DenseArray,
    pub final_bias: DenseArray,
    /// `(d_model, vocab)`.
    pub unembedding: DenseArray,
    pub adapter: VisualAdapter,
}

impl ModelWeights {
    pub fn zeros(config: &ModelConfig, adapter: VisualAdapter) -> Self {
        let (d, v) = (config.d_model, config.vocab().len());
        Self {
            config: config.clone(),
            token_embedding: DenseArray::zeros(&[v, d]),
            positional_embedding: DenseArray::zeros(&[config.max_seq, d]),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
            final_gain: DenseArray::filled(&[d], 1.0),
            final_bias: DenseArray::zeros(&[d]),
            unembedding: DenseArray::zeros(&[d, v]),
            adapter,
        }
    }

    /// Gaussian initialization scaled by fan-in, norms at identity.
    pub fn random(config: &ModelConfig, adapter: VisualAdapter, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(config, adapter);
        let mut fill = |a: &mut DenseArray, fan_in: usize| {
            let n = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            a.data_mut().iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        let (d, dh, m) = (config.d_model, config.d_head(), config.d_mlp);
        fill(&mut w.token_embedding, 1);
        fill(&mut w.positional_embedding, 1);
        for layer in &mut w.layers {
            for a in layer.wq.iter_mut().chain(&mut layer.wk).chain(&mut layer.wv) {
                fill(a, d);
            }
            for a in &mut layer.wo {
                fill(a, dh * config.n_heads);
            }
            fill(&mut layer.w1, d);
            fill(&mut layer.w2, m);
        }
        fill(&mut w.unembedding, d);
        Ok(w)
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    /// Arrays other than the adapter, with stable names.
    pub(crate) fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, a)| (format!("layers.{l}.{n}"), a)));
        }
        out.extend([
            ("final_gain".to_string(), &self.final_gain),
            ("final_bias".to_string(), &self.final_bias),
            ("unembedding".to_string(), &self.unembedding),
        ]);
        out
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut DenseArray)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("positional_embedding".to_string(), &mut self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, a)| (format!("layers.{l}.{n}"), a)));
        }
        out.extend([
            ("final_gain".to_string(), &mut self.final_gain),
            ("final_bias".to_string(), &mut self.final_bias),
            ("unembedding".to_string(), &mut self.unembedding),
        ]);
        out
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (d, dh, m, v) = (c.d_model, c.d_head(), c.d_mlp, c.vocab().len());
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("positional_embedding".to_string(), vec![c.max_seq, d]),
        ];
        for l in 0..c.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("ln1_gain"), vec![d]));
            out.push((p("ln1_bias"), vec![d]));
            for tag in ["wq", "wk", "wv"] {
                out.extend((0..c.n_heads).map(|h| (p(&format!("{tag}.{h}")), vec![d, dh])));
            }
            out.extend((0..c.n_heads).map(|h| (p(&format!("wo.{h}")), vec![dh, d])));
            out.push((p("ln2_gain"), vec![d]));
            out.push((p("ln2_bias"), vec![d]));
            out.push((p("w1"), vec![d, m]));
            out.push((p("b1"), vec![m]));
            out.push((p("w2"), vec![m, d]));
            out.push((p("b2"), vec![d]));
        }
        out.extend([
            ("final_gain".to_string(), vec![d]),
            ("final_bias".to_string(), vec![d]),
            ("unembedding".to_string(), vec![d, v]),
        ]);
        out
    }

    /// Checks shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let named = self.named();
        let expected = self.expected_shapes();
        if named.len() != expected.len() {
            return Err(Error::Dimension(format!(
                "expected {} arrays, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, a), (_, shape)) in named.iter().zip(&expected) {
            if a.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("{name}: shape {:?}, expected {shape:?}", a.shape())));
            }
            if !a.is_finite() {
                return Err(Error::Contract(format!("{name} has non-finite values")));
            }
        }
        let ad = &self.adapter;
        if ad.projection.shape() != [self.config.d_vis, self.config.d_model]
            || ad.mean_embedding.shape() != [self.config.d_model]
        {
            return Err(Error::Dimension("visual adapter shape mismatch".into()));
        }
        if !ad.projection.is_finite() || !ad.mean_embedding.is_finite() {
            return Err(Error::Contract("visual adapter has non-finite values".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, a)| a.is_finite())
    }
}
