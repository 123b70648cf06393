// SPDX-License-Identifier: MIT OR Apache-2.0

//! Momentum SGD on answer-token cross-entropy, as a second model source.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalItem;
use crate::gridworld::{derive_seed, TokenGrid, World};
use crate::model::{
    assemble_input, embed_taped, forward_taped, generate, reference_answer, CorpusManifest, InterventionPlan,
    ModelConfig, ModelWeights, Prompt, VisualAdapter, WeightVars,
};
use crate::numerics::{DenseArray, Tape};

/// One prompt over one image with its reference answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub grid: TokenGrid,
    pub prompt: Prompt,
    pub answer: Vec<usize>,
}

/// Localization and binary examples for each item's target class.
pub fn examples_from_items(config: &ModelConfig, items: &[EvalItem]) -> Result<Vec<TrainExample>> {
    let vocab = config.vocab();
    let mut out = Vec::with_capacity(2 * items.len());
    for it in items {
        for prompt in [Prompt::localize(it.target_class), Prompt::binary(it.target_class)] {
            out.push(TrainExample {
                grid: it.grid.clone(),
                prompt,
                answer: reference_answer(&vocab, &it.scene, prompt)?.0,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate must be positive and momentum in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step, before the update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Exact-match greedy accuracy over the dataset after training.
    pub final_accuracy: f64,
}

/// Frozen Gaussian visual projection for trained models.
pub fn random_adapter(config: &ModelConfig, world: &World, corpus: CorpusManifest, seed: u64) -> Result<VisualAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0 / (config.d_vis as f64).sqrt()).expect("positive std");
    let data = (0..config.d_vis * config.d_model).map(|_| n.sample(&mut rng)).collect();
    VisualAdapter::new(DenseArray::new(vec![config.d_vis, config.d_model], data)?, world, corpus)
}

/// Summed answer NLL of one example, with gradients when `grads` is given.
fn example_loss(w: &ModelWeights, ex: &TrainExample, grads: Option<&mut [DenseArray]>) -> Result<f64> {
    if ex.answer.is_empty() {
        return Err(Error::Training("example has an empty answer".into()));
    }
    let prompt = assemble_input(w, &ex.grid, ex.prompt)?;
    let full = prompt.extended(w, &ex.answer[..ex.answer.len() - 1])?;
    let mut tape = Tape::new();
    let wv = WeightVars::record(&mut tape, w)?;
    let rows = embed_taped(&mut tape, &wv, &full, None)?;
    let plan = InterventionPlan::default_for(&w.config);
    let logits = forward_taped(&mut tape, &wv, w, rows, &plan, false)?;
    let lp = tape.log_softmax_rows(logits)?;
    let first = prompt.len() - 1;
    let picks: Vec<(usize, usize)> = ex.answer.iter().enumerate().map(|(k, &t)| (first + k, t)).collect();
    let picked = tape.pick(lp, &picks)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0)?;
    let value = tape.value(loss).data()[0];
    if let Some(acc) = grads {
        let mut g = tape.backward(loss)?;
        for (slot, v) in acc.iter_mut().zip(wv.all()) {
            let gv = g.take(v);
            slot.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok(value)
}

/// Mean per-example loss over `data`.
pub fn dataset_loss(w: &ModelWeights, data: &[TrainExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += example_loss(w, ex, None)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Fraction of examples whose greedy answer equals the reference.
pub fn answer_accuracy(w: &ModelWeights, data: &[TrainExample]) -> Result<f64> {
    let mut hits = 0usize;
    for ex in data {
        let input = assemble_input(w, &ex.grid, ex.prompt)?;
        hits += usize::from(generate(w, &input, ex.answer.len())? == ex.answer);
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Initializes from `rng_seed` and trains; see [`train_from`].
pub fn train_model(
    config: &ModelConfig,
    adapter: VisualAdapter,
    data: &[TrainExample],
    params: &TrainParams,
    rng_seed: u64,
) -> Result<(ModelWeights, TrainReport)> {
    let init = ModelWeights::random(config, adapter, derive_seed(rng_seed, 0))?;
    train_from(init, data, params, derive_seed(rng_seed, 1))
}

/// Runs `params.steps` momentum-SGD steps over shuffled passes of `data`.
pub fn train_from(
    mut w: ModelWeights,
    data: &[TrainExample],
    params: &TrainParams,
    order_seed: u64,
) -> Result<(ModelWeights, TrainReport)> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: Vec<DenseArray> = w.named().iter().map(|(_, a)| DenseArray::zeros(a.shape())).collect();
    let mut losses = Vec::with_capacity(params.steps);
    let initial_loss = dataset_loss(&w, data)?;
    for step in 0..params.steps {
        let mut grads: Vec<DenseArray> = velocity.iter().map(|v| DenseArray::zeros(v.shape())).collect();
        let mut loss = 0.0;
        for _ in 0..params.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            loss += example_loss(&w, &data[i], Some(&mut grads))?;
        }
        let scale = 1.0 / params.batch_size as f64;
        loss *= scale;
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt() * scale;
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                last_finite: Box::new(w),
            });
        }
        losses.push(loss);
        let clip = params.clip_norm.map_or(1.0, |c| if norm > c { c / norm } else { 1.0 });
        let before = w.clone();
        for ((v, g), (_, p)) in velocity.iter_mut().zip(&grads).zip(w.named_mut()) {
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = params.momentum * *vi + gi * scale * clip;
                *pi -= params.learning_rate * *vi;
            }
        }
        if !w.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                last_finite: Box::new(before),
            });
        }
    }
    let final_loss = dataset_loss(&w, data)?;
    Ok((
        w.clone(),
        TrainReport {
            losses,
            initial_loss,
            final_loss,
            final_accuracy: answer_accuracy(&w, data)?,
        },
    ))
}
