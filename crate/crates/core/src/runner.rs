// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven experiment runs with deterministic result files.
//!
//! A run reads an [`ExperimentConfig`], computes one experiment kind and
//! writes its CSV/JSON results plus `run_record.json` into the output
//! directory. Everything except the record's wall-clock field depends only
//! on the config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{
    ablation_table, containerization_sweep, model_ig, shuffle_experiment, AblationTableParams, IgObjective,
    ShuffleMode,
};
use crate::causal::{
    attention_knockout_sweep, cma_sweep, control_pairs, cross_task_ablation, hallucination_filter, head_ablation_curve,
    CmaTask, HeadGroup, HeadRanking, KnockoutSpec, MediationReport, DEFAULT_FRACTIONS, MASKING_DEFINITION,
    PATCH_POSITIONS,
};
use crate::error::{Error, Result};
use crate::eval::{answer_budget, answer_item, sample_items, score_answers, EvalItem, PromptSet};
use crate::gridworld::{derive_seed, read_scene_file, GenParams, SceneFile, World};
use crate::metrics::{false_positive_rate, iou, parse_box_answer};
use crate::model::{
    assemble_input, generate, load_checkpoint, write_checkpoint, CorpusManifest, ModelConfig, ModelWeights, Prompt,
    PromptKind,
};
use crate::planted::{plant_model, CircuitManifest, PlantParams};
use crate::probes::{probe_curve, DEFAULT_EPOCHS};
use crate::training::{examples_from_items, random_adapter, train_model, TrainParams};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RECORD_FILE: &str = "run_record.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Gen,
    Plant,
    Train,
    Eval,
    Ablate,
    Probe,
    Knockout,
    Cma,
    HeadAblate,
    Report,
}

impl ExperimentKind {
    pub const ALL: [Self; 10] = [
        Self::Gen,
        Self::Plant,
        Self::Train,
        Self::Eval,
        Self::Ablate,
        Self::Probe,
        Self::Knockout,
        Self::Cma,
        Self::HeadAblate,
        Self::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gen => "gen",
            Self::Plant => "plant",
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Ablate => "ablate",
            Self::Probe => "probe",
            Self::Knockout => "knockout",
            Self::Cma => "cma",
            Self::HeadAblate => "head-ablate",
            Self::Report => "report",
        }
    }

    fn needs_model(self) -> bool {
        !matches!(self, Self::Gen | Self::Plant | Self::Train | Self::Report)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Planted in memory from `config` when absent.
    pub checkpoint: Option<PathBuf>,
    pub config: ModelConfig,
    pub temperature: Option<f64>,
    pub corpus: CorpusManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// Scene manifest; its generation parameters replace the `world` section.
    pub manifest: Option<PathBuf>,
    pub count: usize,
    /// First generation seed when no manifest is given.
    pub first_seed: Option<u64>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            manifest: None,
            count: 200,
            first_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    /// Also write one control pair per scene.
    pub pairs: bool,
}

impl Default for GenSection {
    fn default() -> Self {
        Self { pairs: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Include the list prompt.
    pub list: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { list: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub table: AblationTableParams,
    pub container_paddings: Vec<usize>,
    pub container_scalings: Vec<usize>,
    pub container_seeds: Vec<u64>,
    pub shuffle_seeds: Vec<u64>,
    /// Items whose integrated-gradients completeness is logged.
    pub ig_check_items: usize,
    pub ig_check_steps: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            table: AblationTableParams::default(),
            container_paddings: vec![0, 1, 2],
            container_scalings: vec![0, 1, 2],
            container_seeds: (0..10).collect(),
            shuffle_seeds: vec![0, 1, 2],
            ig_check_items: 20,
            ig_check_steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub epochs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            train_scenes: 5000,
            test_scenes: 1000,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnockoutSection {
    pub group_size: usize,
    pub include_all_layers: bool,
}

impl Default for KnockoutSection {
    fn default() -> Self {
        Self {
            group_size: 2,
            include_all_layers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmaSection {
    pub tasks: Vec<CmaTask>,
    pub n_examples: usize,
}

impl Default for CmaSection {
    fn default() -> Self {
        Self {
            tasks: vec![CmaTask::Localization, CmaTask::ClassificationBinary],
            n_examples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadAblateSection {
    pub fractions: Vec<f64>,
    /// Control pairs used to rank heads.
    pub n_examples: usize,
}

impl Default for HeadAblateSection {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            n_examples: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Output directories of earlier runs.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub world: Option<GenParams>,
    pub model: ModelSection,
    pub scenes: SceneSection,
    pub gen: GenSection,
    pub train: TrainParams,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub probe: ProbeSection,
    pub knockout: KnockoutSection,
    pub cma: CmaSection,
    pub head_ablate: HeadAblateSection,
    pub report: ReportSection,
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.out.as_mut().map(fix);
        self.model.checkpoint.as_mut().map(fix);
        self.scenes.manifest.as_mut().map(fix);
        self.report.runs.iter_mut().for_each(fix);
    }

    /// Every referenced input must exist.
    pub fn check_files(&self) -> Result<()> {
        let mut needed: Vec<PathBuf> = self.model.checkpoint.iter().chain(&self.scenes.manifest).cloned().collect();
        needed.extend(self.report.runs.iter().map(|r| r.join(RECORD_FILE)));
        match needed.iter().find(|p| !p.is_file()) {
            Some(p) => Err(Error::Config(format!("referenced file {} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form without the output directory.
    pub fn hash(&self, kind: ExperimentKind) -> Result<String> {
        let mut c = self.clone();
        c.out = None;
        c.kind = Some(kind);
        Ok(hex(&Sha256::digest(serde_json::to_vec(&c)?)))
    }

    fn scene_first_seed(&self) -> u64 {
        self.scenes.first_seed.unwrap_or_else(|| derive_seed(self.seed, 1))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub artifact_version: String,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub files: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
    /// Every seed the run consumed, by purpose.
    pub seeds: BTreeMap<String, serde_json::Value>,
    pub summary: Vec<(String, String)>,
    pub complete: bool,
    pub error: Option<String>,
}

impl RunRecord {
    /// One line per summary entry, aligned.
    pub fn summary_table(&self) -> String {
        let width = self.summary.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("{} run {} ({:.1}s)\n", self.kind, &self.config_hash[..12], self.wall_clock_seconds);
        for (k, v) in &self.summary {
            out.push_str(&format!("  {k:<width$}  {v}\n"));
        }
        if let Some(e) = &self.error {
            out.push_str(&format!("  INCOMPLETE: {e}\n"));
        }
        out
    }
}

#[derive(Default)]
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    summary: Vec<(String, String)>,
    seeds: BTreeMap<String, serde_json::Value>,
}

impl Outputs {
    fn file(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.file(name, text);
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        self.file(name, bytes);
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl fmt::Display) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    fn seed(&mut self, purpose: &str, value: impl Serialize) {
        self.seeds.insert(purpose.to_string(), serde_json::to_value(value).expect("seed values serialize"));
    }
}

/// Runs `kind` and writes results plus the run record into `config.out`.
///
/// A failing experiment still writes whatever results it produced and a
/// record flagged incomplete, then returns the error with the kind attached.
pub fn run_experiment(config: &ExperimentConfig, kind: ExperimentKind) -> Result<RunRecord> {
    if let Some(k) = config.kind {
        if k != kind {
            return Err(Error::Config(format!("config is for {k}, not {kind}")));
        }
    }
    let out_dir = config
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    config.check_files()?;
    let config_hash = config.hash(kind)?;
    let start = Instant::now();
    let mut out = Outputs::default();
    out.seed("seed", config.seed);
    let result = dispatch(config, kind, &mut out);
    fs::create_dir_all(&out_dir)?;
    let mut files = Vec::new();
    for (name, bytes) in &out.files {
        fs::write(out_dir.join(name), bytes)?;
        files.push(FileDigest {
            path: name.clone(),
            sha256: hex(&Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
    }
    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        artifact_version: ARTIFACT_VERSION.to_string(),
        kind,
        config_hash,
        files,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        seeds: out.seeds,
        summary: out.summary,
        complete: result.is_ok(),
        error: result.as_ref().err().map(ToString::to_string),
    };
    fs::write(out_dir.join(RECORD_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    match result {
        Ok(()) => Ok(record),
        Err(e) => Err(Error::Experiment {
            kind: kind.to_string(),
            source: Box::new(e),
        }),
    }
}

fn dispatch(cfg: &ExperimentConfig, kind: ExperimentKind, out: &mut Outputs) -> Result<()> {
    if kind == ExperimentKind::Report {
        return run_report(cfg, out);
    }
    let (world, manifest) = load_world(cfg)?;
    if kind == ExperimentKind::Gen {
        return run_gen(cfg, &world, out);
    }
    if kind == ExperimentKind::Plant {
        let (w, circuit) = plant(cfg, &world)?;
        return write_model(&w, Some(&circuit), out);
    }
    let items = load_items(cfg, &world, manifest, out)?;
    if kind == ExperimentKind::Train {
        return run_train(cfg, &world, &items, out);
    }
    debug_assert!(kind.needs_model());
    let w = load_model(cfg, &world, out)?;
    match kind {
        ExperimentKind::Eval => run_eval(cfg, &world, &w, &items, out),
        ExperimentKind::Ablate => run_ablate(cfg, &w, &items, out),
        ExperimentKind::Probe => run_probe(cfg, &world, &w, out),
        ExperimentKind::Knockout => run_knockout(cfg, &w, &items, out),
        ExperimentKind::Cma => run_cma(cfg, &world, &w, &items, out),
        ExperimentKind::HeadAblate => run_head_ablate(cfg, &world, &w, &items, out),
        _ => unreachable!("handled above"),
    }
}

fn load_world(cfg: &ExperimentConfig) -> Result<(World, Option<SceneFile>)> {
    match &cfg.scenes.manifest {
        Some(path) => {
            if cfg.world.is_some() {
                return Err(Error::Config("give either a scene manifest or a world section, not both".into()));
            }
            let file = read_scene_file(path)?;
            Ok((World::new(file.params.clone())?, Some(file)))
        }
        None => Ok((World::new(cfg.world.clone().unwrap_or_default())?, None)),
    }
}

/// Manifest scenes get render seeds derived from the run seed.
fn load_items(cfg: &ExperimentConfig, world: &World, manifest: Option<SceneFile>, out: &mut Outputs) -> Result<Vec<EvalItem>> {
    let items = match manifest {
        Some(file) => {
            let render_base = derive_seed(cfg.seed, 7);
            out.seed("render_base", render_base);
            file.scenes
                .into_iter()
                .take(cfg.scenes.count)
                .enumerate()
                .map(|(i, scene)| {
                    let render_seed = derive_seed(render_base, i as u64);
                    let target_class = scene
                        .objects
                        .first()
                        .ok_or_else(|| Error::EmptyInput(format!("manifest scene {i} has no objects")))?
                        .class_id;
                    Ok(EvalItem {
                        grid: world.render_tokens(&scene, render_seed),
                        scene,
                        render_seed,
                        target_class,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let first = cfg.scene_first_seed();
            out.seed("scenes_first_seed", first);
            sample_items(world, first, cfg.scenes.count)?
        }
    };
    if items.is_empty() {
        return Err(Error::EmptyInput("no scenes to run on".into()));
    }
    out.note("scenes", items.len());
    Ok(items)
}

fn check_compatible(config: &ModelConfig, world: &World) -> Result<()> {
    if world.grid_size() != config.grid_size
        || world.num_classes() != config.num_classes
        || world.params.d_vis != config.d_vis
    {
        return Err(Error::Config("model and world disagree on grid size, classes or d_vis".into()));
    }
    Ok(())
}

fn plant(cfg: &ExperimentConfig, world: &World) -> Result<(ModelWeights, CircuitManifest)> {
    let params = PlantParams {
        temperature: cfg.model.temperature,
        corpus: cfg.model.corpus,
    };
    plant_model(&cfg.model.config, world, &params)
}

fn load_model(cfg: &ExperimentConfig, world: &World, out: &mut Outputs) -> Result<ModelWeights> {
    let w = match &cfg.model.checkpoint {
        Some(path) => {
            out.note("model", path.display());
            load_checkpoint(path)?
        }
        None => {
            out.note("model", "planted in memory");
            plant(cfg, world)?.0
        }
    };
    check_compatible(&w.config, world)?;
    Ok(w)
}

fn write_model(w: &ModelWeights, circuit: Option<&CircuitManifest>, out: &mut Outputs) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(w, &mut bytes)?;
    out.note("checkpoint bytes", bytes.len());
    out.file("model.ckpt", bytes);
    if let Some(c) = circuit {
        out.json("circuit.json", c)?;
        out.note("cls head", format!("L{}H{}", c.cls_head.layer, c.cls_head.head));
        let locs: Vec<String> = c.loc_heads.iter().map(|h| format!("L{}H{}", h.head.layer, h.head.head)).collect();
        out.note("loc heads", locs.join(" "));
    }
    Ok(())
}

fn run_gen(cfg: &ExperimentConfig, world: &World, out: &mut Outputs) -> Result<()> {
    if cfg.scenes.manifest.is_some() {
        return Err(Error::Config("gen writes a manifest and cannot read one".into()));
    }
    let first = cfg.scene_first_seed();
    out.seed("scenes_first_seed", first);
    let items = sample_items(world, first, cfg.scenes.count)?;
    let pairs = if cfg.gen.pairs {
        items
            .iter()
            .map(|it| world.make_control_pair(&it.scene, it.target_class, it.render_seed))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let file = SceneFile {
        params: world.params.clone(),
        scenes: items.iter().map(|it| it.scene.clone()).collect(),
        pairs,
    };
    out.note("scenes", file.scenes.len());
    out.note("control pairs", file.pairs.len());
    out.file("scenes.jsonl", file.to_lines()?);
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn run_train(cfg: &ExperimentConfig, world: &World, items: &[EvalItem], out: &mut Outputs) -> Result<()> {
    check_compatible(&cfg.model.config, world)?;
    let (adapter_seed, init_seed) = (derive_seed(cfg.seed, 6), derive_seed(cfg.seed, 5));
    out.seed("adapter", adapter_seed);
    out.seed("init_and_order", init_seed);
    let adapter = random_adapter(&cfg.model.config, world, cfg.model.corpus, adapter_seed)?;
    let data = examples_from_items(&cfg.model.config, items)?;
    let (w, report) = train_model(&cfg.model.config, adapter, &data, &cfg.train, init_seed)?;
    let rows: Vec<LossRow> = report.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    out.csv("train_losses.csv", &rows)?;
    out.json("train_report.json", &report)?;
    out.note("initial loss", format!("{:.4}", report.initial_loss));
    out.note("final loss", format!("{:.4}", report.final_loss));
    out.note("train exact-match", format!("{:.3}", report.final_accuracy));
    write_model(&w, None, out)
}

#[derive(Serialize)]
struct ItemRow {
    item: usize,
    target_class: usize,
    gt_x_min: usize,
    gt_y_min: usize,
    gt_x_max: usize,
    gt_y_max: usize,
    parsed: bool,
    iou: f64,
    binary_yes: bool,
    list_hit: Option<bool>,
    control_yes: bool,
}

#[derive(Serialize)]
struct EvalScores {
    schema_version: u32,
    n: usize,
    localization: Option<f64>,
    binary: Option<f64>,
    list: Option<f64>,
    control_pairs: usize,
    false_positive_rate: f64,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn run_eval(cfg: &ExperimentConfig, world: &World, w: &ModelWeights, items: &[EvalItem], out: &mut Outputs) -> Result<()> {
    let prompts = if cfg.eval.list { PromptSet::ALL } else { PromptSet::LOC_BINARY };
    let vocab = w.vocab();
    let answers = items
        .iter()
        .map(|it| answer_item(w, it, &[], prompts))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_answers(w, items, &answers)?;
    let pairs = control_pairs(world, items)?;
    let budget = answer_budget(w, PromptKind::ClassifyBinary);
    let control_yes = pairs
        .iter()
        .map(|p| {
            let input = assemble_input(w, &p.base, Prompt::binary(p.pair.target_class))?;
            Ok(generate(w, &input, budget)?.first() == Some(&vocab.yes()))
        })
        .collect::<Result<Vec<bool>>>()?;
    let fpr = false_positive_rate(&control_yes);
    let mut rows = Vec::with_capacity(items.len());
    for (i, (it, a)) in items.iter().zip(&answers).enumerate() {
        let gt = it.target_box();
        let pred = a.localize.as_ref().and_then(|t| parse_box_answer(t, &vocab).ok());
        rows.push(ItemRow {
            item: i,
            target_class: it.target_class,
            gt_x_min: gt.x_min,
            gt_y_min: gt.y_min,
            gt_x_max: gt.x_max,
            gt_y_max: gt.y_max,
            parsed: pred.is_some(),
            iou: pred.map_or(0.0, |p| iou(&p, &gt)),
            binary_yes: a.binary.as_ref().and_then(|b| b.first()) == Some(&vocab.yes()),
            list_hit: a.list.as_ref().map(|l| l.contains(&vocab.class(it.target_class))),
            control_yes: control_yes[i],
        });
    }
    out.csv("per_item.csv", &rows)?;
    out.json(
        "scores.json",
        &EvalScores {
            schema_version: RESULT_SCHEMA_VERSION,
            n: scores.n,
            localization: scores.localization,
            binary: scores.binary,
            list: scores.list,
            control_pairs: pairs.len(),
            false_positive_rate: fpr,
        },
    )?;
    out.note("localization", fmt_opt(scores.localization));
    out.note("binary", fmt_opt(scores.binary));
    out.note("list", fmt_opt(scores.list));
    out.note("false positive rate", format!("{fpr:.3}"));
    Ok(())
}

#[derive(Serialize)]
struct ContainerRow {
    padding: usize,
    scaling: usize,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct IgRow {
    item: usize,
    objective: IgObjective,
    steps: usize,
    f_input: f64,
    f_baseline: f64,
    attribution_sum: f64,
    completeness_residual: f64,
}

fn run_ablate(cfg: &ExperimentConfig, w: &ModelWeights, items: &[EvalItem], out: &mut Outputs) -> Result<()> {
    let a = &cfg.ablate;
    out.seed("random_ablation", &a.table.random_seeds);
    out.seed("containerization", &a.container_seeds);
    out.seed("shuffle", &a.shuffle_seeds);

    let table = ablation_table(w, items, &a.table)?;
    out.csv("ablation_table.csv", &table)?;
    for r in &table {
        out.note(&format!("ablate {}", r.strategy), format!("loc {:.3} cls {:.3}", r.loc_acc, r.cls_acc));
    }

    let m = containerization_sweep(w, items, &a.container_paddings, &a.container_scalings, &a.container_seeds)?;
    let mut rows = Vec::new();
    for (pi, &padding) in m.paddings.iter().enumerate() {
        for (si, &scaling) in m.scalings.iter().enumerate() {
            rows.push(ContainerRow {
                padding,
                scaling,
                mean: m.mean[pi][si],
                std: m.std[pi][si],
            });
        }
    }
    out.csv("containerization.csv", &rows)?;
    out.note("containerization items", format!("{} evaluated, {} skipped", m.evaluated, m.skipped));

    let shuffles = [ShuffleMode::Object, ShuffleMode::Full]
        .into_iter()
        .map(|mode| shuffle_experiment(w, items, mode, &a.shuffle_seeds))
        .collect::<Result<Vec<_>>>()?;
    out.csv("shuffle.csv", &shuffles)?;
    for s in &shuffles {
        out.note(&format!("shuffle {:?}", s.mode).to_lowercase(), format!("loc {:.3} cls {:.3}", s.loc_mean, s.cls_mean));
    }

    let mut ig = Vec::new();
    for (i, item) in items.iter().take(a.ig_check_items).enumerate() {
        for objective in [IgObjective::BoxCoordinates, IgObjective::ClassLogit] {
            let r = model_ig(w, item, objective, a.ig_check_steps)?;
            ig.push(IgRow {
                item: i,
                objective,
                steps: a.ig_check_steps,
                f_input: r.f_input,
                f_baseline: r.f_baseline,
                attribution_sum: r.attribution_sum,
                completeness_residual: r.completeness_residual,
            });
        }
    }
    out.csv("ig_completeness.csv", &ig)?;
    let worst = ig.iter().map(|r| r.completeness_residual).fold(0.0, f64::max);
    out.note("max IG completeness residual", format!("{worst:.2e}"));
    Ok(())
}

fn run_probe(cfg: &ExperimentConfig, world: &World, w: &ModelWeights, out: &mut Outputs) -> Result<()> {
    let p = &cfg.probe;
    let (train_seed, test_seed, fit_seed) = (derive_seed(cfg.seed, 2), derive_seed(cfg.seed, 3), derive_seed(cfg.seed, 4));
    out.seed("probe_train_scenes", train_seed);
    out.seed("probe_test_scenes", test_seed);
    out.seed("probe_fit", fit_seed);
    let grids = |first, n| -> Result<Vec<_>> { Ok(sample_items(world, first, n)?.into_iter().map(|it| it.grid).collect()) };
    let curve = probe_curve(w, &grids(train_seed, p.train_scenes)?, &grids(test_seed, p.test_scenes)?, p.epochs, fit_seed)?;
    out.file(
        "probe_curve.csv",
        format!(
            "# train_scenes={} test_scenes={} epochs={}\n{}",
            curve.n_train_scenes,
            curve.n_test_scenes,
            curve.epochs,
            curve.curve_csv()
        ),
    );
    out.file("probe_heatmap.csv", curve.heatmap_csv());
    out.json("probe_curve.json", &curve)?;
    let best = &curve.layers[curve.best];
    out.note("best layer", format!("{} (joint {:.3})", best.tag, best.joint_accuracy));
    Ok(())
}

#[derive(Serialize)]
struct KnockoutCsvRow<'a> {
    group: &'a str,
    layers: String,
    localization: f64,
    classification: f64,
    loc_delta: f64,
    cls_delta: f64,
}

fn run_knockout(cfg: &ExperimentConfig, w: &ModelWeights, items: &[EvalItem], out: &mut Outputs) -> Result<()> {
    let mut spec = KnockoutSpec::consecutive(w.config.n_layers, cfg.knockout.group_size)?;
    spec.include_all_layers = cfg.knockout.include_all_layers;
    let rows = attention_knockout_sweep(w, items, &spec)?;
    let csv_rows: Vec<KnockoutCsvRow> = rows
        .iter()
        .map(|r| KnockoutCsvRow {
            group: &r.group,
            layers: r.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
            localization: r.localization,
            classification: r.classification,
            loc_delta: r.loc_delta,
            cls_delta: r.cls_delta,
        })
        .collect();
    out.csv("knockout.csv", &csv_rows)?;
    for r in &rows {
        out.note(&format!("knockout {}", r.group), format!("loc {:.3} cls {:.3}", r.localization, r.classification));
    }
    Ok(())
}

#[derive(Serialize)]
struct CmaSummary<'a> {
    schema_version: u32,
    task: &'a str,
    n_examples: usize,
    excluded: usize,
    masking: &'a str,
    patch_positions: &'a str,
    sparsity_005: f64,
    top4: Vec<String>,
}

fn mediation(
    world: &World,
    w: &ModelWeights,
    items: &[EvalItem],
    task: CmaTask,
    n_examples: usize,
) -> Result<MediationReport> {
    let pairs = hallucination_filter(w, &control_pairs(world, items)?, task)?;
    cma_sweep(w, &pairs, task, n_examples)
}

#[derive(Serialize)]
struct RankRow {
    layer: usize,
    head: usize,
    mean_mf: f64,
}

fn write_mediation(report: &MediationReport, ranking: &HeadRanking, out: &mut Outputs) -> Result<()> {
    let name = report.task.name();
    out.file(&format!("cma_{name}.csv"), report.to_csv());
    out.csv(
        &format!("cma_{name}_ranking.csv"),
        &ranking
            .ordered
            .iter()
            .map(|r| RankRow {
                layer: r.head.layer,
                head: r.head.head,
                mean_mf: r.mean_mf,
            })
            .collect::<Vec<_>>(),
    )?;
    let top4: Vec<String> = ranking.top(4).iter().map(|h| format!("L{}H{}", h.layer, h.head)).collect();
    out.note(&format!("{name} top-4"), top4.join(" "));
    out.note(&format!("{name} sparsity"), format!("{:.3}", report.sparsity(0.05)));
    out.json(
        &format!("cma_{name}.json"),
        &CmaSummary {
            schema_version: RESULT_SCHEMA_VERSION,
            task: name,
            n_examples: report.n_examples,
            excluded: report.excluded,
            masking: MASKING_DEFINITION,
            patch_positions: PATCH_POSITIONS,
            sparsity_005: report.sparsity(0.05),
            top4,
        },
    )
}

fn run_cma(cfg: &ExperimentConfig, world: &World, w: &ModelWeights, items: &[EvalItem], out: &mut Outputs) -> Result<()> {
    if cfg.cma.tasks.is_empty() {
        return Err(Error::Config("cma.tasks is empty".into()));
    }
    for &task in &cfg.cma.tasks {
        let report = mediation(world, w, items, task, cfg.cma.n_examples)?;
        write_mediation(&report, &HeadRanking::from_report(&report), out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    group: HeadGroup,
    fraction: f64,
    n_heads: usize,
    localization: f64,
    classification: f64,
}

fn run_head_ablate(cfg: &ExperimentConfig, world: &World, w: &ModelWeights, items: &[EvalItem], out: &mut Outputs) -> Result<()> {
    let n = cfg.head_ablate.n_examples;
    let fractions = &cfg.head_ablate.fractions;
    let loc = HeadRanking::from_report(&mediation(world, w, items, CmaTask::Localization, n)?);
    let cls = HeadRanking::from_report(&mediation(world, w, items, CmaTask::ClassificationBinary, n)?);
    let mut rows = Vec::new();
    let mut aucs = BTreeMap::new();
    for group in [HeadGroup::TaskCritical, HeadGroup::LowImportance] {
        let curve = head_ablation_curve(w, items, &loc, group, fractions)?;
        rows.extend(curve.points.iter().map(|p| CurveRow {
            group,
            fraction: p.fraction,
            n_heads: p.n_heads,
            localization: p.localization,
            classification: p.classification,
        }));
        out.note(&format!("{group:?} normalized AUC"), format!("{:.3}", curve.normalized_auc));
        aucs.insert(format!("{group:?}"), curve.normalized_auc);
    }
    out.csv("head_ablation.csv", &rows)?;
    let cross = cross_task_ablation(w, items, &cls, &loc, fractions)?;
    out.csv("cross_task.csv", &cross.points)?;
    out.note("cls/loc top-10 overlap", cross.top10_overlap);
    out.json(
        "head_ablation.json",
        &serde_json::json!({
            "schema_version": RESULT_SCHEMA_VERSION,
            "normalized_auc": aucs,
            "top10_overlap": cross.top10_overlap,
            "loc_ranking": loc,
            "cls_ranking": cls,
        }),
    )
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    kind: ExperimentKind,
    config_hash: String,
    complete: bool,
    key: String,
    value: String,
}

fn run_report(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    if cfg.report.runs.is_empty() {
        return Err(Error::Config("report.runs is empty".into()));
    }
    let mut rows = Vec::new();
    for (i, dir) in cfg.report.runs.iter().enumerate() {
        let record: RunRecord = serde_json::from_str(&fs::read_to_string(dir.join(RECORD_FILE))?)?;
        let run = format!("run{i}");
        out.note(&run, format!("{} {}", record.kind, if record.complete { "complete" } else { "INCOMPLETE" }));
        for (key, value) in &record.summary {
            rows.push(ReportRow {
                run: run.clone(),
                kind: record.kind,
                config_hash: record.config_hash.clone(),
                complete: record.complete,
                key: key.clone(),
                value: value.clone(),
            });
        }
    }
    out.csv("report.csv", &rows)
}
