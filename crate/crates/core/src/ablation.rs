// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual-token ablation: selection strategies, mean-embedding replacement,
//! containerization and shuffle perturbations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_with, EvalItem, PromptSet, Scores};
use crate::gridworld::{box_cells, derive_seed, mask_to_tokens, CellSet, Scene};
use crate::metrics::{localization_score, parse_box_answer, BoundingBox};
use crate::model::{
    assemble_input, embed_taped, forward_taped, reference_answer, InterventionPlan, InterventionSpec, ModelInput,
    ModelWeights, Prompt, PromptKind, WeightVars,
};
use crate::numerics::{DenseArray, Tape};

pub const PADDINGS: [i32; 5] = [-2, -1, 0, 1, 2];
pub const DEFAULT_IG_STEPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum AblationPlan {
    ObjectMask { padding: i32 },
    IntegratedGradients { k: usize },
    Random { k: usize, seed: u64 },
    Register,
}

impl AblationPlan {
    pub fn validate(&self, n_image_tokens: usize) -> Result<()> {
        match self {
            Self::ObjectMask { padding } if !PADDINGS.contains(padding) => {
                Err(Error::Contract(format!("padding {padding} outside [-2, 2]")))
            }
            Self::IntegratedGradients { k } | Self::Random { k, .. } if *k > n_image_tokens => Err(Error::Contract(
                format!("k = {k} exceeds {n_image_tokens} image tokens"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSelection {
    pub cells: CellSet,
    /// Share of all image tokens, in percent.
    pub token_pct: f64,
    /// Set when the padded mask is empty and the ablation is a no-op.
    pub empty: bool,
}

pub fn select_object_tokens(scene: &Scene, target_class: usize, padding: i32) -> Result<ObjectSelection> {
    AblationPlan::ObjectMask { padding }.validate(usize::MAX)?;
    let o = scene
        .object(target_class)
        .ok_or_else(|| Error::Lookup(format!("class {target_class} not in scene")))?;
    let g = scene.grid_size;
    let cells = mask_to_tokens(&box_cells(&o.bbox, g), padding, g);
    Ok(ObjectSelection {
        token_pct: 100.0 * cells.len() as f64 / (g * g) as f64,
        empty: cells.is_empty(),
        cells,
    })
}

/// Tokens whose norm exceeds the mean by more than two population standard deviations.
pub fn select_register_tokens(token_embeddings: &DenseArray) -> Result<CellSet> {
    let n = token_embeddings.rows();
    if n < 2 {
        return Err(Error::Contract("need at least two image tokens".into()));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| token_embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / n as f64;
    let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let cut = mean + 2.0 * var.sqrt();
    Ok((0..n).filter(|&i| norms[i] > cut).collect())
}

/// `k` cells drawn uniformly without replacement.
pub fn select_random_tokens(n_tokens: usize, k: usize, seed: u64) -> Result<CellSet> {
    AblationPlan::Random { k, seed }.validate(n_tokens)?;
    let mut idx: Vec<usize> = (0..n_tokens).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(idx.into_iter().take(k).collect())
}

/// Indices of the `k` largest values; equal values resolve to the lowest index.
pub fn top_k(values: &[f64], k: usize) -> CellSet {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).collect()
}

/// Replacement of the selected image cells by the mean visual embedding.
pub fn ablation_spec(image_start: usize, cells: &CellSet, mean_embedding: &DenseArray) -> Result<InterventionSpec> {
    let d = mean_embedding.len();
    let mut data = Vec::with_capacity(cells.len() * d);
    for _ in cells {
        data.extend_from_slice(mean_embedding.data());
    }
    Ok(InterventionSpec::ReplaceEmbedding {
        positions: cells.iter().map(|c| image_start + c).collect(),
        values: DenseArray::new(vec![cells.len(), d], data)?,
    })
}

/// Returns inputs whose selected image rows hold `mean_embedding`.
pub fn apply_ablation(input: &ModelInput, cells: &CellSet, mean_embedding: &DenseArray) -> Result<ModelInput> {
    let n_img = input.image_range.len();
    if let Some(c) = cells.iter().find(|&&c| c >= n_img) {
        return Err(Error::Contract(format!("cell {c} outside the image slot")));
    }
    if mean_embedding.len() != input.embeddings.cols() {
        return Err(Error::Dimension("mean embedding width".into()));
    }
    let mut out = input.clone();
    for &c in cells {
        out.embeddings
            .row_mut(input.image_range.start + c)
            .copy_from_slice(mean_embedding.data());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgObjective {
    /// Logit of the correct yes/no token on the binary prompt.
    ClassLogit,
    /// Sum of correct-coordinate log-probabilities over the four coordinate steps.
    BoxCoordinates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgReport {
    /// Same shape as the input.
    pub attributions: DenseArray,
    /// L2 norm of each attribution row.
    pub magnitudes: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
    pub attribution_sum: f64,
    /// `|Σ attributions − (F(x) − F(b))| / |F(x) − F(b)|`.
    pub completeness_residual: f64,
}

/// Midpoint-rule integrated gradients of `f` from `baseline` to `input`.
///
/// `f` returns the objective value and its gradient at a point.
pub fn integrated_gradients(
    input: &DenseArray,
    baseline: &DenseArray,
    steps: usize,
    mut f: impl FnMut(&DenseArray) -> Result<(f64, DenseArray)>,
) -> Result<IgReport> {
    if steps == 0 {
        return Err(Error::Contract("integrated gradients needs at least one step".into()));
    }
    if input.shape() != baseline.shape() {
        return Err(Error::Dimension("input and baseline shapes differ".into()));
    }
    let diff = input.zip_map(baseline, |x, b| x - b)?;
    let mut acc = vec![0.0; input.len()];
    for i in 0..steps {
        let alpha = (i as f64 + 0.5) / steps as f64;
        let point = baseline.zip_map(&diff, |b, d| b + alpha * d)?;
        let (_, grad) = f(&point)?;
        if grad.shape() != input.shape() {
            return Err(Error::Dimension("gradient shape differs from input".into()));
        }
        acc.iter_mut().zip(grad.data()).for_each(|(a, g)| *a += g);
    }
    let attr: Vec<f64> = acc
        .iter()
        .zip(diff.data())
        .map(|(a, d)| a / steps as f64 * d)
        .collect();
    let attributions = DenseArray::new(input.shape().to_vec(), attr)?;
    let f_input = f(input)?.0;
    let f_baseline = f(baseline)?.0;
    let attribution_sum = attributions.sum();
    let gap = f_input - f_baseline;
    let completeness_residual = if gap == 0.0 {
        (attribution_sum - gap).abs()
    } else {
        ((attribution_sum - gap) / gap).abs()
    };
    let magnitudes = (0..attributions.rows())
        .map(|r| attributions.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(IgReport {
        attributions,
        magnitudes,
        f_input,
        f_baseline,
        attribution_sum,
        completeness_residual,
    })
}

/// Objective value and gradient with respect to the projected image rows.
fn model_objective(
    weights: &ModelWeights,
    input: &ModelInput,
    picks: &[(usize, usize)],
    log_prob: bool,
    visual: &DenseArray,
) -> Result<(f64, DenseArray)> {
    let mut tape = Tape::new();
    let wv = WeightVars::record(&mut tape, weights)?;
    let vis = tape.input(visual.clone())?;
    let rows = embed_taped(&mut tape, &wv, input, Some(vis))?;
    let plan = InterventionPlan::default_for(&weights.config);
    let logits = forward_taped(&mut tape, &wv, weights, rows, &plan, true)?;
    let scored = if log_prob { tape.log_softmax_rows(logits)? } else { logits };
    let picked = tape.pick(scored, picks)?;
    let total = tape.sum(picked)?;
    let value = tape.value(total).data()[0];
    let mut grads = tape.backward(total)?;
    Ok((value, grads.take(vis)))
}

/// Objective values along the straight path from the all-mean image to the input.
pub fn objective_path(weights: &ModelWeights, item: &EvalItem, objective: IgObjective, alphas: &[f64]) -> Result<Vec<f64>> {
    let (input, picks, log_prob, visual, baseline) = ig_setup(weights, item, objective)?;
    alphas
        .iter()
        .map(|&a| {
            let p = baseline.zip_map(&visual, |b, x| b + a * (x - b))?;
            Ok(model_objective(weights, &input, &picks, log_prob, &p)?.0)
        })
        .collect()
}

#[allow(clippy::type_complexity)]
fn ig_setup(
    weights: &ModelWeights,
    item: &EvalItem,
    objective: IgObjective,
) -> Result<(ModelInput, Vec<(usize, usize)>, bool, DenseArray, DenseArray)> {
    let vocab = weights.vocab();
    let (prompt, log_prob) = match objective {
        IgObjective::ClassLogit => (Prompt::binary(item.target_class), false),
        IgObjective::BoxCoordinates => (Prompt::localize(item.target_class), true),
    };
    let base = assemble_input(weights, &item.grid, prompt)?;
    let (answer, _) = reference_answer(&vocab, &item.scene, prompt)?;
    let (input, picks) = match prompt.kind {
        PromptKind::ClassifyBinary => {
            let row = base.len() - 1;
            (base, vec![(row, answer[0])])
        }
        PromptKind::Localize => {
            let full = base.extended(weights, &answer[..answer.len() - 1])?;
            let first = base.len() - 1;
            let picks = answer
                .iter()
                .enumerate()
                .filter(|(_, t)| vocab.coord_value(**t).is_some())
                .map(|(k, &t)| (first + k, t))
                .collect();
            (full, picks)
        }
        PromptKind::ClassifyList => return Err(Error::Contract("no differentiable list objective".into())),
    };
    let r = input.image_range.clone();
    let visual = input.embeddings.slice_rows(r.start, r.end);
    let mean = &weights.adapter.mean_embedding;
    let mut bdata = Vec::with_capacity(visual.len());
    for _ in 0..visual.rows() {
        bdata.extend_from_slice(mean.data());
    }
    let baseline = DenseArray::new(visual.shape().to_vec(), bdata)?;
    Ok((input, picks, log_prob, visual, baseline))
}

/// Integrated gradients of the chosen objective for `item`, baseline = all-mean image.
pub fn model_ig(weights: &ModelWeights, item: &EvalItem, objective: IgObjective, steps: usize) -> Result<IgReport> {
    let (input, picks, log_prob, visual, baseline) = ig_setup(weights, item, objective)?;
    integrated_gradients(&visual, &baseline, steps, |x| {
        model_objective(weights, &input, &picks, log_prob, x)
    })
}

/// Top-`k` image cells by attribution magnitude.
pub fn select_ig_tokens(
    weights: &ModelWeights,
    item: &EvalItem,
    objective: IgObjective,
    k: usize,
    steps: usize,
) -> Result<(CellSet, IgReport)> {
    let n_img = item.grid.embeddings.rows();
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    AblationPlan::IntegratedGradients { k }.validate(n_img)?;
    let report = model_ig(weights, item, objective, steps)?;
    Ok((top_k(&report.magnitudes, k), report))
}

/// One row of the strategy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub tokens_pct: f64,
    pub loc_acc: f64,
    pub cls_acc: f64,
    pub delta_vs_baseline: f64,
    /// Std of `loc_acc` across seeds (0 for deterministic strategies).
    pub std: f64,
    pub cls_delta: f64,
    pub cls_std: f64,
    /// Items whose selection was empty (no-op ablation).
    pub empty_selections: usize,
    /// Mean fraction of selected cells inside the object mask.
    pub object_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationTableParams {
    pub paddings: Vec<i32>,
    pub random_seeds: Vec<u64>,
    pub ig_steps: usize,
    pub include_ig: bool,
    pub include_register: bool,
}

impl Default for AblationTableParams {
    fn default() -> Self {
        Self {
            paddings: PADDINGS.to_vec(),
            random_seeds: vec![0, 1, 2],
            ig_steps: DEFAULT_IG_STEPS,
            include_ig: true,
            include_register: true,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

struct RowBuilder {
    baseline: Scores,
}

impl RowBuilder {
    fn row(&self, strategy: String, pct: f64, runs: &[Scores], empty: usize, overlap: f64) -> AblationRow {
        let locs: Vec<f64> = runs.iter().map(|s| s.localization.unwrap_or(0.0)).collect();
        let clss: Vec<f64> = runs.iter().map(|s| s.binary.unwrap_or(0.0)).collect();
        let (loc, loc_std) = mean_std(&locs);
        let (cls, cls_std) = mean_std(&clss);
        AblationRow {
            strategy,
            tokens_pct: pct,
            loc_acc: loc,
            cls_acc: cls,
            delta_vs_baseline: loc - self.baseline.localization.unwrap_or(0.0),
            std: loc_std,
            cls_delta: cls - self.baseline.binary.unwrap_or(0.0),
            cls_std,
            empty_selections: empty,
            object_overlap: overlap,
        }
    }
}

fn object_cells(item: &EvalItem) -> CellSet {
    box_cells(&item.target_box(), item.grid.grid_size)
}

fn overlap_fraction(sel: &CellSet, obj: &CellSet) -> f64 {
    if sel.is_empty() {
        0.0
    } else {
        sel.intersection(obj).count() as f64 / sel.len() as f64
    }
}

fn eval_selected(weights: &ModelWeights, items: &[EvalItem], cells: &[CellSet]) -> Result<Scores> {
    let mean = weights.adapter.mean_embedding.clone();
    evaluate_with(weights, items, PromptSet::LOC_BINARY, |i, _| {
        Ok(vec![ablation_spec(SYSTEM_START, &cells[i], &mean)?])
    })
}

const SYSTEM_START: usize = crate::model::SYSTEM_LEN;

/// Localization / binary accuracy under each selection strategy.
pub fn ablation_table(weights: &ModelWeights, items: &[EvalItem], params: &AblationTableParams) -> Result<Vec<AblationRow>> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no evaluation items".into()));
    }
    let baseline = evaluate(weights, items, PromptSet::LOC_BINARY)?;
    let rb = RowBuilder { baseline };
    let n_img = items[0].grid.embeddings.rows();
    let mut rows = vec![rb.row("baseline".into(), 0.0, &[baseline], 0, 0.0)];
    let objs: Vec<CellSet> = items.iter().map(object_cells).collect();

    for &p in &params.paddings {
        let sels = items
            .iter()
            .map(|it| select_object_tokens(&it.scene, it.target_class, p))
            .collect::<Result<Vec<_>>>()?;
        let cells: Vec<CellSet> = sels.iter().map(|s| s.cells.clone()).collect();
        let scores = eval_selected(weights, items, &cells)?;
        let pct = sels.iter().map(|s| s.token_pct).sum::<f64>() / items.len() as f64;
        let empty = sels.iter().filter(|s| s.empty).count();
        let overlap = cells.iter().zip(&objs).map(|(s, o)| overlap_fraction(s, o)).sum::<f64>() / items.len() as f64;
        rows.push(rb.row(format!("object_p{p:+}"), pct, &[scores], empty, overlap));
    }

    let budget: Vec<usize> = objs.iter().map(CellSet::len).collect();
    let pct = budget.iter().map(|&k| 100.0 * k as f64 / n_img as f64).sum::<f64>() / items.len() as f64;

    let mut runs = Vec::new();
    let mut overlap = 0.0;
    for &seed in &params.random_seeds {
        let cells = items
            .iter()
            .enumerate()
            .map(|(i, _)| select_random_tokens(n_img, budget[i], derive_seed(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        overlap += cells.iter().zip(&objs).map(|(s, o)| overlap_fraction(s, o)).sum::<f64>() / items.len() as f64;
        runs.push(eval_selected(weights, items, &cells)?);
    }
    if !runs.is_empty() {
        let n = runs.len() as f64;
        rows.push(rb.row("random".into(), pct, &runs, 0, overlap / n));
    }

    if params.include_ig {
        let mut loc_cells = Vec::with_capacity(items.len());
        let mut cls_cells = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            loc_cells.push(select_ig_tokens(weights, item, IgObjective::BoxCoordinates, budget[i], params.ig_steps)?.0);
            cls_cells.push(select_ig_tokens(weights, item, IgObjective::ClassLogit, budget[i], params.ig_steps)?.0);
        }
        let loc = eval_selected(weights, items, &loc_cells)?;
        let cls = eval_selected(weights, items, &cls_cells)?;
        let merged = Scores {
            binary: cls.binary,
            ..loc
        };
        let overlap = loc_cells.iter().zip(&objs).map(|(s, o)| overlap_fraction(s, o)).sum::<f64>() / items.len() as f64;
        rows.push(rb.row("integrated_gradients".into(), pct, &[merged], 0, overlap));
    }

    if params.include_register {
        let mut cells = Vec::with_capacity(items.len());
        for item in items {
            cells.push(select_register_tokens(&weights.adapter.project(&item.grid.embeddings)?)?);
        }
        let scores = eval_selected(weights, items, &cells)?;
        let pct = cells.iter().map(|c| 100.0 * c.len() as f64 / n_img as f64).sum::<f64>() / items.len() as f64;
        let empty = cells.iter().filter(|c| c.is_empty()).count();
        let overlap = cells.iter().zip(&objs).map(|(s, o)| overlap_fraction(s, o)).sum::<f64>() / items.len() as f64;
        rows.push(rb.row("register".into(), pct, &[scores], empty, overlap));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMatrix {
    pub paddings: Vec<usize>,
    pub scalings: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `[padding][scaling]`.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub evaluated: usize,
    /// Items whose object cannot be dilated by the largest padding inside the grid.
    pub skipped: usize,
}

/// Copies randomly chosen object tokens into the ring of width `padding` around the box.
pub fn containerize_spec(
    weights: &ModelWeights,
    item: &EvalItem,
    padding: usize,
    seed: u64,
) -> Result<Option<InterventionSpec>> {
    if padding == 0 {
        return Ok(None);
    }
    let g = item.grid.grid_size;
    let obj: Vec<usize> = object_cells(item).into_iter().collect();
    let grown = item.target_box().dilated(padding, g);
    let ring: Vec<usize> = box_cells(&grown, g).difference(&box_cells(&item.target_box(), g)).copied().collect();
    let visual = weights.adapter.project(&item.grid.embeddings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(ring.len() * visual.cols());
    for _ in &ring {
        let src = *obj.choose(&mut rng).expect("object has cells");
        data.extend_from_slice(visual.row(src));
    }
    Ok(Some(InterventionSpec::ReplaceEmbedding {
        positions: ring.iter().map(|c| SYSTEM_START + c).collect(),
        values: DenseArray::new(vec![ring.len(), visual.cols()], data)?,
    }))
}

/// Localization success of padded inputs against boxes grown by each scaling.
pub fn containerization_sweep(
    weights: &ModelWeights,
    items: &[EvalItem],
    paddings: &[usize],
    scalings: &[usize],
    seeds: &[u64],
) -> Result<ContainerMatrix> {
    let g = weights.config.grid_size;
    let reach = paddings.iter().chain(scalings).copied().max().unwrap_or(0);
    let kept: Vec<&EvalItem> = items.iter().filter(|it| it.target_box().fits_dilation(reach, g)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyInput("no item survives the largest dilation".into()));
    }
    let vocab = weights.vocab();
    let mut mean = vec![vec![0.0; scalings.len()]; paddings.len()];
    let mut std = vec![vec![0.0; scalings.len()]; paddings.len()];
    for (pi, &p) in paddings.iter().enumerate() {
        // per seed, per scaling
        let mut per_seed: Vec<Vec<f64>> = vec![Vec::new(); scalings.len()];
        for &seed in seeds {
            let mut preds = Vec::with_capacity(kept.len());
            for (i, item) in kept.iter().enumerate() {
                let spec = containerize_spec(weights, item, p, derive_seed(seed, i as u64))?;
                let specs: Vec<InterventionSpec> = spec.into_iter().collect();
                let ans = crate::eval::answer_item(
                    weights,
                    item,
                    &specs,
                    PromptSet {
                        localize: true,
                        binary: false,
                        list: false,
                    },
                )?;
                preds.push(parse_box_answer(ans.localize.as_ref().expect("requested"), &vocab).ok());
            }
            for (si, &s) in scalings.iter().enumerate() {
                let gts: Vec<BoundingBox> = kept.iter().map(|it| it.target_box().dilated(s, g)).collect();
                per_seed[si].push(localization_score(&preds, &gts)?);
            }
        }
        for (si, vals) in per_seed.iter().enumerate() {
            let (m, s) = mean_std(vals);
            mean[pi][si] = m;
            std[pi][si] = s;
        }
    }
    Ok(ContainerMatrix {
        paddings: paddings.to_vec(),
        scalings: scalings.to_vec(),
        seeds: seeds.to_vec(),
        mean,
        std,
        evaluated: kept.len(),
        skipped: items.len() - kept.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    Full,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRow {
    pub mode: ShuffleMode,
    pub loc_mean: f64,
    pub loc_std: f64,
    pub cls_mean: f64,
    pub cls_std: f64,
    pub baseline_loc: f64,
    pub baseline_cls: f64,
}

/// Random permutation of the image rows at `cells`.
pub fn shuffle_spec(cells: &[usize], seed: u64) -> InterventionSpec {
    let mut permutation: Vec<usize> = (0..cells.len()).collect();
    permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    InterventionSpec::ShuffleTokens {
        positions: cells.iter().map(|c| SYSTEM_START + c).collect(),
        permutation,
    }
}

pub fn shuffle_experiment(weights: &ModelWeights, items: &[EvalItem], mode: ShuffleMode, seeds: &[u64]) -> Result<ShuffleRow> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no evaluation items".into()));
    }
    let baseline = evaluate(weights, items, PromptSet::LOC_BINARY)?;
    let mut locs = Vec::new();
    let mut clss = Vec::new();
    for &seed in seeds {
        let s = evaluate_with(weights, items, PromptSet::LOC_BINARY, |i, item| {
            let cells: Vec<usize> = match mode {
                ShuffleMode::Full => (0..item.grid.embeddings.rows()).collect(),
                ShuffleMode::Object => object_cells(item).into_iter().collect(),
            };
            Ok(vec![shuffle_spec(&cells, derive_seed(seed, i as u64))])
        })?;
        locs.push(s.localization.unwrap_or(0.0));
        clss.push(s.binary.unwrap_or(0.0));
    }
    let (loc_mean, loc_std) = mean_std(&locs);
    let (cls_mean, cls_std) = mean_std(&clss);
    Ok(ShuffleRow {
        mode,
        loc_mean,
        loc_std,
        cls_mean,
        cls_std,
        baseline_loc: baseline.localization.unwrap_or(0.0),
        baseline_cls: baseline.binary.unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_examples() {
        let flat = DenseArray::filled(&[64, 3], 1.0);
        assert!(select_register_tokens(&flat).unwrap().is_empty());
        let mut rows = vec![vec![1.0, 0.0]; 64];
        rows[17] = vec![50.0, 0.0];
        let a = DenseArray::from_rows(&rows).unwrap();
        assert_eq!(select_register_tokens(&a).unwrap(), CellSet::from([17]));
        let mut rows = vec![vec![1.0, 0.0]; 64];
        rows[3] = vec![9.0, 0.0];
        rows[40] = vec![0.0, -9.0];
        let a = DenseArray::from_rows(&rows).unwrap();
        let sel = select_register_tokens(&a).unwrap();
        assert_eq!(sel.contains(&3), sel.contains(&40));
        assert!(select_register_tokens(&DenseArray::filled(&[1, 2], 1.0)).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.0; 5], 2), CellSet::from([0, 1]));
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 2), CellSet::from([1, 2]));
    }

    #[test]
    fn linear_ig_matches_closed_form() {
        let w = DenseArray::new(vec![3, 2], vec![1.5, -2.0, 0.25, 4.0, -1.0, 0.5]).unwrap();
        let x = DenseArray::new(vec![3, 2], vec![0.3, 1.0, -2.0, 0.7, 5.0, 1.1]).unwrap();
        let b = DenseArray::new(vec![3, 2], vec![0.1, 0.1, 0.1, -0.4, 0.0, 0.2]).unwrap();
        for steps in [1, 7, 64] {
            let r = integrated_gradients(&x, &b, steps, |p| {
                let v: f64 = p.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                Ok((v, w.clone()))
            })
            .unwrap();
            for i in 0..6 {
                let expect = w.data()[i] * (x.data()[i] - b.data()[i]);
                assert!((r.attributions.data()[i] - expect).abs() < 1e-10);
            }
            assert!(r.completeness_residual < 1e-10);
        }
    }

    #[test]
    fn constant_ig_is_zero() {
        let x = DenseArray::filled(&[4, 2], 1.0);
        let b = DenseArray::zeros(&[4, 2]);
        let r = integrated_gradients(&x, &b, 8, |_| Ok((3.0, DenseArray::zeros(&[4, 2])))).unwrap();
        assert!(r.magnitudes.iter().all(|&m| m == 0.0));
        assert_eq!(top_k(&r.magnitudes, 2), CellSet::from([0, 1]));
    }

    #[test]
    fn random_selection_validates_budget() {
        assert_eq!(select_random_tokens(64, 5, 1).unwrap().len(), 5);
        assert!(select_random_tokens(64, 65, 1).is_err());
        assert_eq!(select_random_tokens(64, 5, 1).unwrap(), select_random_tokens(64, 5, 1).unwrap());
    }
}
