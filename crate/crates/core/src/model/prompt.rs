// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt templates and input assembly.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ModelWeights, Vocab};
use crate::error::{Error, Result};
use crate::gridworld::{Scene, TokenGrid};
use crate::numerics::DenseArray;

/// `<bos> <system>` precede the image slot.
pub const SYSTEM_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Localize,
    ClassifyList,
    ClassifyBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub kind: PromptKind,
    /// Queried class; unused by the list prompt.
    pub class_id: usize,
}

impl Prompt {
    pub fn localize(class_id: usize) -> Self {
        Self {
            kind: PromptKind::Localize,
            class_id,
        }
    }

    pub fn binary(class_id: usize) -> Self {
        Self {
            kind: PromptKind::ClassifyBinary,
            class_id,
        }
    }

    pub fn list() -> Self {
        Self {
            kind: PromptKind::ClassifyList,
            class_id: 0,
        }
    }
}

/// Task tokens following the image, ending with `ASSISTANT:`.
pub fn task_tokens(vocab: &Vocab, prompt: Prompt) -> Result<Vec<usize>> {
    if prompt.kind != PromptKind::ClassifyList && prompt.class_id >= vocab.num_classes() {
        return Err(Error::Lookup(format!("class {} out of range", prompt.class_id)));
    }
    let class = || Vocab::class_name(prompt.class_id);
    let text = match prompt.kind {
        PromptKind::Localize => format!("Please provide the bounding box coordinates of the {} . ASSISTANT:", class()),
        PromptKind::ClassifyBinary => format!("Is there a {} in the image ? ASSISTANT:", class()),
        PromptKind::ClassifyList => {
            let names: Vec<String> = (0..vocab.num_classes()).map(Vocab::class_name).collect();
            format!("List all objects in the image . Choose only from {} . ASSISTANT:", names.join(" , "))
        }
    };
    vocab.encode(&text)
}

/// Token ids plus pre-positional embedding rows for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Image positions hold the `<image>` placeholder id.
    pub tokens: Vec<usize>,
    /// `(len, d_model)`, before positional embeddings.
    pub embeddings: DenseArray,
    pub image_range: Range<usize>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends token rows, as in teacher forcing.
    pub fn extended(&self, weights: &ModelWeights, extra: &[usize]) -> Result<Self> {
        let n = self.len() + extra.len();
        if n > weights.config.max_seq {
            return Err(Error::Capacity(format!("sequence of {n} exceeds max_seq {}", weights.config.max_seq)));
        }
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(extra);
        let mut data = self.embeddings.data().to_vec();
        for &t in extra {
            data.extend_from_slice(weights.token_embedding.row(t));
        }
        Ok(Self {
            tokens,
            embeddings: DenseArray::new(vec![n, weights.config.d_model], data)?,
            image_range: self.image_range.clone(),
        })
    }
}

pub fn assemble_input(weights: &ModelWeights, grid: &TokenGrid, prompt: Prompt) -> Result<ModelInput> {
    let config = &weights.config;
    let vocab = weights.vocab();
    if grid.grid_size != config.grid_size {
        return Err(Error::Dimension(format!(
            "grid size {} for a model built for {}",
            grid.grid_size, config.grid_size
        )));
    }
    let visual = weights.adapter.project(&grid.embeddings)?;
    let task = task_tokens(&vocab, prompt)?;
    let n_img = visual.rows();
    let n = SYSTEM_LEN + n_img + task.len();
    if n > config.max_seq {
        return Err(Error::Capacity(format!("sequence of {n} exceeds max_seq {}", config.max_seq)));
    }
    let mut tokens = vec![vocab.bos(), vocab.system()];
    tokens.extend(std::iter::repeat_n(vocab.image(), n_img));
    tokens.extend_from_slice(&task);
    let mut data = Vec::with_capacity(n * config.d_model);
    for &t in &tokens[..SYSTEM_LEN] {
        data.extend_from_slice(weights.token_embedding.row(t));
    }
    data.extend_from_slice(visual.data());
    for &t in &task {
        data.extend_from_slice(weights.token_embedding.row(t));
    }
    Ok(ModelInput {
        tokens,
        embeddings: DenseArray::new(vec![n, config.d_model], data)?,
        image_range: SYSTEM_LEN..SYSTEM_LEN + n_img,
    })
}

/// Expected answer tokens and the template mask (true = excluded from scoring).
pub fn reference_answer(vocab: &Vocab, scene: &Scene, prompt: Prompt) -> Result<(Vec<usize>, Vec<bool>)> {
    let tokens = match prompt.kind {
        PromptKind::Localize => {
            let o = scene
                .object(prompt.class_id)
                .ok_or_else(|| Error::Lookup(format!("class {} not in scene", prompt.class_id)))?;
            let b = o.bbox;
            vec![
                vocab.lbracket(),
                vocab.coord(b.x_min),
                vocab.comma(),
                vocab.coord(b.y_min),
                vocab.comma(),
                vocab.coord(b.x_max),
                vocab.comma(),
                vocab.coord(b.y_max),
                vocab.rbracket(),
                vocab.eos(),
            ]
        }
        PromptKind::ClassifyBinary => {
            let ans = if scene.object(prompt.class_id).is_some() {
                vocab.yes()
            } else {
                vocab.no()
            };
            vec![ans, vocab.eos()]
        }
        PromptKind::ClassifyList => {
            let mut classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
            classes.sort_unstable();
            let mut t: Vec<usize> = classes.into_iter().map(|c| vocab.class(c)).collect();
            t.push(vocab.eos());
            t
        }
    };
    let mask = tokens.iter().map(|&t| vocab.is_template(t)).collect();
    Ok((tokens, mask))
}
