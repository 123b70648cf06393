// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy evaluation of the three prompt kinds with shared image prefixes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{Scene, TokenGrid, World};
use crate::metrics::{classification_score, localization_score, parse_box_answer, BoundingBox};
use crate::model::{
    assemble_input, InterventionPlan, InterventionSpec, ModelInput, ModelWeights, Prompt, PromptKind, Session,
};

/// A rendered scene with the class the localization and binary prompts ask about.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub scene: Scene,
    pub render_seed: u64,
    pub grid: TokenGrid,
    pub target_class: usize,
}

impl EvalItem {
    pub fn target_box(&self) -> BoundingBox {
        self.scene.object(self.target_class).expect("target present").bbox
    }
}

/// Generates scenes from consecutive seeds; the first object is the target.
pub fn sample_items(world: &World, first_seed: u64, count: usize) -> Result<Vec<EvalItem>> {
    (0..count as u64)
        .map(|i| {
            let seed = first_seed.wrapping_add(i);
            let scene = world.generate_scene(seed)?;
            let grid = world.render_tokens(&scene, seed);
            let target_class = scene.objects[0].class_id;
            Ok(EvalItem {
                scene,
                render_seed: seed,
                grid,
                target_class,
            })
        })
        .collect()
}

pub fn answer_budget(weights: &ModelWeights, kind: PromptKind) -> usize {
    match kind {
        PromptKind::Localize => 10,
        PromptKind::ClassifyBinary => 2,
        PromptKind::ClassifyList => weights.config.num_classes + 1,
    }
}

/// Runs several prompts over one image, sharing the `[system | image]` prefix.
pub struct PrefixRunner<'w> {
    weights: &'w ModelWeights,
    prefix: Session<'w>,
    prefix_logits_len: usize,
    grid: &'w TokenGrid,
}

impl<'w> PrefixRunner<'w> {
    pub fn new(weights: &'w ModelWeights, grid: &'w TokenGrid, plan: Arc<InterventionPlan>) -> Result<Self> {
        let probe = assemble_input(weights, grid, Prompt::list())?;
        let mut prefix = Session::with_plan(weights, plan, false);
        prefix.extend(&probe.embeddings.slice_rows(0, probe.image_range.end))?;
        Ok(Self {
            weights,
            prefix,
            prefix_logits_len: probe.image_range.end,
            grid,
        })
    }

    pub fn answer(&self, prompt: Prompt) -> Result<Vec<usize>> {
        let input = assemble_input(self.weights, self.grid, prompt)?;
        let mut s = self.prefix.clone();
        let logits = s.extend(&input.embeddings.slice_rows(self.prefix_logits_len, input.len()))?;
        let last = logits.row(logits.rows() - 1).to_vec();
        s.generate(&last, answer_budget(self.weights, prompt.kind))
    }
}

/// Raw answers for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAnswers {
    pub localize: Option<Vec<usize>>,
    pub binary: Option<Vec<usize>>,
    pub list: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSet {
    pub localize: bool,
    pub binary: bool,
    pub list: bool,
}

impl PromptSet {
    pub const ALL: Self = Self {
        localize: true,
        binary: true,
        list: true,
    };
    pub const LOC_BINARY: Self = Self {
        localize: true,
        binary: true,
        list: false,
    };
}

/// Answers the selected prompts for one item under `interventions`.
pub fn answer_item(
    weights: &ModelWeights,
    item: &EvalItem,
    interventions: &[InterventionSpec],
    prompts: PromptSet,
) -> Result<ItemAnswers> {
    let plan = Arc::new(InterventionPlan::new(&weights.config, interventions)?);
    let runner = PrefixRunner::new(weights, &item.grid, plan)?;
    Ok(ItemAnswers {
        localize: prompts
            .localize
            .then(|| runner.answer(Prompt::localize(item.target_class)))
            .transpose()?,
        binary: prompts
            .binary
            .then(|| runner.answer(Prompt::binary(item.target_class)))
            .transpose()?,
        list: prompts.list.then(|| runner.answer(Prompt::list())).transpose()?,
    })
}

/// Aggregate scores over a set of items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    /// Mean success over IoU thresholds for the target box.
    pub localization: Option<f64>,
    /// Fraction answering "yes" for the present target class.
    pub binary: Option<f64>,
    /// Fraction of target classes named in the list answer.
    pub list: Option<f64>,
}

pub fn score_answers(weights: &ModelWeights, items: &[EvalItem], answers: &[ItemAnswers]) -> Result<Scores> {
    if items.len() != answers.len() {
        return Err(Error::Contract("items and answers differ in length".into()));
    }
    let vocab = weights.vocab();
    let all = |f: fn(&ItemAnswers) -> bool| !answers.is_empty() && answers.iter().all(f);
    let localization = if all(|a| a.localize.is_some()) {
        let preds: Vec<Option<BoundingBox>> = answers
            .iter()
            .map(|a| parse_box_answer(a.localize.as_ref().expect("checked"), &vocab).ok())
            .collect();
        let gts: Vec<BoundingBox> = items.iter().map(EvalItem::target_box).collect();
        Some(localization_score(&preds, &gts)?)
    } else {
        None
    };
    let binary = all(|a| a.binary.is_some()).then(|| {
        let yes = answers
            .iter()
            .filter(|a| a.binary.as_ref().expect("checked").first() == Some(&vocab.yes()))
            .count();
        yes as f64 / answers.len() as f64
    });
    let list = all(|a| a.list.is_some()).then(|| {
        let responses: Vec<Vec<usize>> = answers.iter().map(|a| a.list.clone().expect("checked")).collect();
        let gt: Vec<usize> = items.iter().map(|i| vocab.class(i.target_class)).collect();
        classification_score(&responses, &gt)
    });
    Ok(Scores {
        n: items.len(),
        localization,
        binary,
        list,
    })
}

/// Evaluates `items` with per-item interventions built by `make`.
pub fn evaluate_with(
    weights: &ModelWeights,
    items: &[EvalItem],
    prompts: PromptSet,
    mut make: impl FnMut(usize, &EvalItem) -> Result<Vec<InterventionSpec>>,
) -> Result<Scores> {
    let answers = items
        .iter()
        .enumerate()
        .map(|(i, item)| answer_item(weights, item, &make(i, item)?, prompts))
        .collect::<Result<Vec<_>>>()?;
    score_answers(weights, items, &answers)
}

pub fn evaluate(weights: &ModelWeights, items: &[EvalItem], prompts: PromptSet) -> Result<Scores> {
    evaluate_with(weights, items, prompts, |_, _| Ok(Vec::new()))
}

/// Input for a prompt on an item, used by teacher-forced scoring.
pub fn item_input(weights: &ModelWeights, item: &EvalItem, prompt: Prompt) -> Result<ModelInput> {
    assemble_input(weights, &item.grid, prompt)
}
