// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention knockout, head-wise causal mediation and cumulative head ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_with, EvalItem, PromptSet, Scores};
use crate::gridworld::{box_cells, ScenePair, TokenGrid, World};
use crate::model::{
    assemble_input, forward, generate, reference_answer, ForwardTrace, InterventionSpec, ModelInput, ModelWeights,
    PositionSet, Prompt,
};
use crate::planted::HeadId;

/// Examples whose base and source perplexities differ by less than this are excluded.
pub const MF_EPSILON: f64 = 1e-6;

pub const DEFAULT_FRACTIONS: [f64; 7] = [0.0, 1.0 / 64.0, 2.0 / 64.0, 4.0 / 64.0, 8.0 / 64.0, 16.0 / 64.0, 32.0 / 64.0];

/// Stored with every mediation report.
pub const MASKING_DEFINITION: &str =
    "brackets, commas and end-of-sequence excluded; mean NLL over the remaining answer tokens, exponentiated";
pub const PATCH_POSITIONS: &str = "every position from the first system token through the last pre-answer token";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    pub layer_groups: Vec<Vec<usize>>,
    /// Adds a final group blocking every layer.
    pub include_all_layers: bool,
}

impl KnockoutSpec {
    /// Consecutive groups of `size` layers plus the all-layers group.
    pub fn consecutive(n_layers: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Contract("knockout group size must be positive".into()));
        }
        let layer_groups = (0..n_layers)
            .step_by(size)
            .map(|s| (s..(s + size).min(n_layers)).collect())
            .collect();
        Ok(Self {
            layer_groups,
            include_all_layers: true,
        })
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let mut seen = vec![false; n_layers];
        for g in &self.layer_groups {
            for &l in g {
                if l >= n_layers {
                    return Err(Error::Contract(format!("knockout layer {l} outside the model")));
                }
                if std::mem::replace(&mut seen[l], true) {
                    return Err(Error::Contract(format!("knockout groups overlap at layer {l}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRow {
    pub group: String,
    pub layers: Vec<usize>,
    pub localization: f64,
    pub classification: f64,
    pub loc_delta: f64,
    pub cls_delta: f64,
}

fn group_label(layers: &[usize], all: bool) -> String {
    match (all, layers) {
        (true, _) => "all".into(),
        (_, []) => "none".into(),
        (_, [a]) => format!("{a}"),
        (_, [a, .., b]) => format!("{a}-{b}"),
    }
}

/// Spec blocking attention from every post-image position to the target's cells.
pub fn knockout_spec(item: &EvalItem, layers: &[usize]) -> InterventionSpec {
    let start = crate::model::SYSTEM_LEN;
    let g = item.grid.grid_size;
    InterventionSpec::BlockAttention {
        layers: layers.to_vec(),
        from: PositionSet::From(start + g * g),
        to: box_cells(&item.target_box(), g).into_iter().map(|c| start + c).collect(),
    }
}

fn scores_pair(s: &Scores) -> (f64, f64) {
    (s.localization.unwrap_or(0.0), s.binary.unwrap_or(0.0))
}

pub fn attention_knockout_sweep(weights: &ModelWeights, items: &[EvalItem], spec: &KnockoutSpec) -> Result<Vec<KnockoutRow>> {
    let n_layers = weights.config.n_layers;
    spec.validate(n_layers)?;
    let (base_loc, base_cls) = scores_pair(&evaluate(weights, items, PromptSet::LOC_BINARY)?);
    let mut groups: Vec<(Vec<usize>, bool)> = spec.layer_groups.iter().map(|g| (g.clone(), false)).collect();
    if spec.include_all_layers {
        groups.push(((0..n_layers).collect(), true));
    }
    let mut rows = vec![KnockoutRow {
        group: "baseline".into(),
        layers: Vec::new(),
        localization: base_loc,
        classification: base_cls,
        loc_delta: 0.0,
        cls_delta: 0.0,
    }];
    for (layers, all) in groups {
        let (loc, cls) = if layers.is_empty() {
            (base_loc, base_cls)
        } else {
            scores_pair(&evaluate_with(weights, items, PromptSet::LOC_BINARY, |_, it| {
                Ok(vec![knockout_spec(it, &layers)])
            })?)
        };
        rows.push(KnockoutRow {
            group: group_label(&layers, all),
            layers,
            localization: loc,
            classification: cls,
            loc_delta: loc - base_loc,
            cls_delta: cls - base_cls,
        });
    }
    Ok(rows)
}

/// Share of the base-to-source perplexity gap closed by patching.
pub fn mediation_fraction(p_base: f64, p_src: f64, p_patched: f64) -> Result<f64> {
    if p_base == p_src {
        return Err(Error::UndefinedMediation(p_base));
    }
    Ok((p_base - p_patched) / (p_base - p_src))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmaTask {
    Localization,
    ClassificationBinary,
}

impl CmaTask {
    pub fn prompt(self, class_id: usize) -> Prompt {
        match self {
            Self::Localization => Prompt::localize(class_id),
            Self::ClassificationBinary => Prompt::binary(class_id),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Localization => "localization",
            Self::ClassificationBinary => "classification_binary",
        }
    }
}

/// A scene pair with both renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPair {
    pub pair: ScenePair,
    pub source: TokenGrid,
    pub base: TokenGrid,
}

/// Object-removed counterparts of each item, rendered with the item's seed.
pub fn control_pairs(world: &World, items: &[EvalItem]) -> Result<Vec<ControlPair>> {
    items
        .iter()
        .map(|it| {
            let pair = world.make_control_pair(&it.scene, it.target_class, it.render_seed)?;
            Ok(ControlPair {
                source: world.render_tokens(&pair.source, pair.render_seed),
                base: world.render_tokens(&pair.base, pair.render_seed),
                pair,
            })
        })
        .collect()
}

/// Keeps pairs whose source is answered correctly and whose base is not.
pub fn hallucination_filter(weights: &ModelWeights, pairs: &[ControlPair], task: CmaTask) -> Result<Vec<ControlPair>> {
    let vocab = weights.vocab();
    let mut kept = Vec::new();
    for p in pairs {
        let prompt = task.prompt(p.pair.target_class);
        let (reference, _) = reference_answer(&vocab, &p.pair.source, prompt)?;
        let answer = |grid: &TokenGrid| -> Result<bool> {
            let input = assemble_input(weights, grid, prompt)?;
            Ok(generate(weights, &input, reference.len())? == reference)
        };
        if answer(&p.source)? && !answer(&p.base)? {
            kept.push(p.clone());
        }
    }
    Ok(kept)
}

/// Teacher-forced inputs and clean traces for one pair.
pub struct PairRun {
    base: ModelInput,
    /// Prompt length; positions `0..prompt_len` are patched.
    prompt_len: usize,
    reference: Vec<usize>,
    mask: Vec<bool>,
    pub p_base: f64,
    pub p_src: f64,
    pub base_trace: ForwardTrace,
    pub source_trace: ForwardTrace,
}

fn perplexity(logits: &crate::numerics::DenseArray, prompt_len: usize, reference: &[usize], mask: &[bool]) -> Result<f64> {
    Ok(crate::model::teacher_forced_nll(logits, prompt_len - 1, reference, mask)?.exp())
}

impl PairRun {
    pub fn new(weights: &ModelWeights, pair: &ControlPair, task: CmaTask) -> Result<Self> {
        let prompt = task.prompt(pair.pair.target_class);
        let (reference, mask) = reference_answer(&weights.vocab(), &pair.pair.source, prompt)?;
        let teacher = &reference[..reference.len() - 1];
        let base_prompt = assemble_input(weights, &pair.base, prompt)?;
        let prompt_len = base_prompt.len();
        let base = base_prompt.extended(weights, teacher)?;
        let source = assemble_input(weights, &pair.source, prompt)?.extended(weights, teacher)?;
        let b = forward(weights, &base, &[], true)?;
        let s = forward(weights, &source, &[], true)?;
        Ok(Self {
            p_base: perplexity(&b.logits, prompt_len, &reference, &mask)?,
            p_src: perplexity(&s.logits, prompt_len, &reference, &mask)?,
            base_trace: b.trace.expect("recorded"),
            source_trace: s.trace.expect("recorded"),
            base,
            prompt_len,
            reference,
            mask,
        })
    }

    /// Base perplexity with `head` overwritten by its output in `donor`.
    pub fn patched_perplexity(&self, weights: &ModelWeights, head: HeadId, donor: &ForwardTrace) -> Result<f64> {
        let out = donor
            .head_outputs
            .get(head.layer)
            .and_then(|l| l.get(head.head))
            .ok_or_else(|| Error::Lookup(format!("head ({}, {}) not in trace", head.layer, head.head)))?;
        let spec = InterventionSpec::PatchHeadOutput {
            layer: head.layer,
            head: head.head,
            positions: (0..self.prompt_len).collect(),
            values: out.slice_rows(0, self.prompt_len),
        };
        let logits = forward(weights, &self.base, &[spec], false)?.logits;
        perplexity(&logits, self.prompt_len, &self.reference, &self.mask)
    }

    pub fn is_excluded(&self) -> bool {
        (self.p_base - self.p_src).abs() < MF_EPSILON
    }
}

/// True when the head's output projection is identically zero.
pub fn head_is_silent(weights: &ModelWeights, head: HeadId) -> bool {
    weights.layers[head.layer].wo[head.head].data().iter().all(|&v| v == 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationReport {
    pub task: CmaTask,
    /// `[layer][head]` mean MF over included examples.
    pub mf: Vec<Vec<f64>>,
    pub p_base: Vec<f64>,
    pub p_src: Vec<f64>,
    pub n_examples: usize,
    pub excluded: usize,
}

pub fn cma_sweep(weights: &ModelWeights, pairs: &[ControlPair], task: CmaTask, n_examples: usize) -> Result<MediationReport> {
    let (nl, nh) = (weights.config.n_layers, weights.config.n_heads);
    let mut sums = vec![vec![0.0; nh]; nl];
    let (mut p_base, mut p_src) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    for pair in pairs.iter().take(n_examples) {
        let run = PairRun::new(weights, pair, task)?;
        if run.is_excluded() {
            excluded += 1;
            continue;
        }
        for (l, row) in sums.iter_mut().enumerate() {
            for (h, sum) in row.iter_mut().enumerate() {
                let head = HeadId::new(l, h);
                // a silent head cannot change the run, so the patched run equals the base
                if !head_is_silent(weights, head) {
                    let p = run.patched_perplexity(weights, head, &run.source_trace)?;
                    *sum += mediation_fraction(run.p_base, run.p_src, p)?;
                }
            }
        }
        p_base.push(run.p_base);
        p_src.push(run.p_src);
    }
    let n = p_base.len();
    if n == 0 {
        return Err(Error::EmptyInput(format!("no usable pairs for {} ({excluded} excluded)", task.name())));
    }
    let mf: Vec<Vec<f64>> = sums.into_iter().map(|r| r.into_iter().map(|s| s / n as f64).collect()).collect();
    if mf.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite mediation fraction".into()));
    }
    Ok(MediationReport {
        task,
        mf,
        p_base,
        p_src,
        n_examples: n,
        excluded,
    })
}

impl MediationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for h in 0..self.mf.first().map_or(0, Vec::len) {
            out.push_str(&format!(",head_{h}"));
        }
        out.push('\n');
        for (l, row) in self.mf.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Fraction of heads with |mean MF| below `threshold`.
    pub fn sparsity(&self, threshold: f64) -> f64 {
        let all: Vec<f64> = self.mf.iter().flatten().copied().collect();
        all.iter().filter(|v| v.abs() < threshold).count() as f64 / all.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub head: HeadId,
    pub mean_mf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    /// Descending mean MF; ties broken by layer then head.
    pub ordered: Vec<RankedHead>,
    /// Heads below the median |MF|, ascending |MF| with the same tie-break.
    pub low_importance: Vec<RankedHead>,
}

impl HeadRanking {
    pub fn from_report(report: &MediationReport) -> Self {
        let mut ordered: Vec<RankedHead> = report
            .mf
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(h, &m)| RankedHead { head: HeadId::new(l, h), mean_mf: m }))
            .collect();
        let mut abs: Vec<f64> = ordered.iter().map(|r| r.mean_mf.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let median = if abs.is_empty() { 0.0 } else { abs[(abs.len() - 1) / 2] };
        let mut low: Vec<RankedHead> = ordered.iter().filter(|r| r.mean_mf.abs() <= median).cloned().collect();
        low.sort_by(|a, b| a.mean_mf.abs().total_cmp(&b.mean_mf.abs()).then(a.head.cmp(&b.head)));
        ordered.sort_by(|a, b| b.mean_mf.total_cmp(&a.mean_mf).then(a.head.cmp(&b.head)));
        Self {
            ordered,
            low_importance: low,
        }
    }

    pub fn top(&self, n: usize) -> Vec<HeadId> {
        self.ordered.iter().take(n).map(|r| r.head).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadGroup {
    TaskCritical,
    LowImportance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub n_heads: usize,
    pub localization: f64,
    pub classification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub group: HeadGroup,
    pub points: Vec<CurvePoint>,
    /// Trapezoidal area under localization vs fraction, divided by the fraction span.
    pub normalized_auc: f64,
}

pub fn zero_heads_spec(heads: &[HeadId]) -> Vec<InterventionSpec> {
    heads
        .iter()
        .map(|h| InterventionSpec::ZeroHeadOutput {
            layer: h.layer,
            head: h.head,
            positions: PositionSet::From(0),
        })
        .collect()
}

pub fn normalized_auc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("AUC needs at least two matching points".into()));
    }
    let span = xs[xs.len() - 1] - xs[0];
    if !(span > 0.0) {
        return Err(Error::Contract("AUC fractions must increase".into()));
    }
    let area: f64 = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
    Ok(area / span)
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Contract(format!("fraction {f} outside [0, 1]")));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("fractions must strictly increase".into()));
    }
    Ok(())
}

fn curve_over(weights: &ModelWeights, items: &[EvalItem], order: &[HeadId], fractions: &[f64]) -> Result<Vec<CurvePoint>> {
    check_fractions(fractions)?;
    let total = weights.config.total_heads();
    fractions
        .iter()
        .map(|&f| {
            let n = ((f * total as f64).round() as usize).min(order.len());
            let spec = zero_heads_spec(&order[..n]);
            let (loc, cls) = scores_pair(&evaluate_with(weights, items, PromptSet::LOC_BINARY, |_, _| Ok(spec.clone()))?);
            Ok(CurvePoint {
                fraction: f,
                n_heads: n,
                localization: loc,
                classification: cls,
            })
        })
        .collect()
}

pub fn head_ablation_curve(
    weights: &ModelWeights,
    items: &[EvalItem],
    ranking: &HeadRanking,
    group: HeadGroup,
    fractions: &[f64],
) -> Result<AblationCurve> {
    let order: Vec<HeadId> = match group {
        HeadGroup::TaskCritical => ranking.top(ranking.ordered.len()),
        HeadGroup::LowImportance => ranking.low_importance.iter().map(|r| r.head).collect(),
    };
    let points = curve_over(weights, items, &order, fractions)?;
    let ys: Vec<f64> = points.iter().map(|p| p.localization).collect();
    Ok(AblationCurve {
        group,
        normalized_auc: normalized_auc(fractions, &ys)?,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskReport {
    /// Localization while removing classification-critical heads.
    pub points: Vec<CurvePoint>,
    /// Heads shared by the top-10 of both rankings.
    pub top10_overlap: usize,
}

pub fn cross_task_ablation(
    weights: &ModelWeights,
    items: &[EvalItem],
    cls_ranking: &HeadRanking,
    loc_ranking: &HeadRanking,
    fractions: &[f64],
) -> Result<CrossTaskReport> {
    let points = curve_over(weights, items, &cls_ranking.top(cls_ranking.ordered.len()), fractions)?;
    let loc_top = loc_ranking.top(10);
    let top10_overlap = cls_ranking.top(10).iter().filter(|h| loc_top.contains(h)).count();
    Ok(CrossTaskReport { points, top10_overlap })
}
