// SPDX-License-Identifier: MIT OR Apache-2.0

use boxcircuit_core::causal::*;
use boxcircuit_core::eval::{evaluate, evaluate_with, sample_items, EvalItem, PromptSet};
use boxcircuit_core::gridworld::{GenParams, World};
use boxcircuit_core::model::{ForwardTrace, ModelConfig, ModelWeights, SYSTEM_LEN};
use boxcircuit_core::planted::{plant_model, CircuitManifest, HeadId, PlantParams};
use boxcircuit_core::Error;

struct Fixture {
    world: World,
    w: ModelWeights,
    man: CircuitManifest,
}

fn fixture() -> Fixture {
    let world = World::new(GenParams::default()).unwrap();
    let (w, man) = plant_model(&ModelConfig::default(), &world, &PlantParams::default()).unwrap();
    Fixture { world, w, man }
}

fn items(f: &Fixture, seed: u64, n: usize) -> Vec<EvalItem> {
    sample_items(&f.world, seed, n).unwrap()
}

#[test]
fn knockout_follows_the_circuit() {
    let f = fixture();
    let items = items(&f, 3000, 40);
    let mut spec = KnockoutSpec::consecutive(8, 2).unwrap();
    spec.layer_groups.push(Vec::new());
    let rows = attention_knockout_sweep(&f.w, &items, &spec).unwrap();
    let base = &rows[0];
    assert_eq!((base.localization, base.classification), (1.0, 1.0));
    let loc_layer = f.man.loc_heads[0].head.layer;
    for r in &rows[1..] {
        if r.group == "none" {
            assert_eq!((r.localization, r.classification), (base.localization, base.classification));
        } else if r.group != "all" && r.layers.contains(&loc_layer) {
            assert!(r.localization < 0.05, "{r:?}");
        } else if r.layers.iter().all(|&l| l > loc_layer) {
            assert!(r.loc_delta.abs() < 0.02, "{r:?}");
        } else if r.layers.iter().all(|&l| l < f.man.cls_head.layer) {
            assert_eq!(r.classification, base.classification, "{r:?}");
        }
    }
    let all = rows.iter().find(|r| r.group == "all").unwrap();
    assert!(rows.iter().all(|r| all.localization <= r.localization));
}

#[test]
fn knockout_rejects_bad_groups() {
    let f = fixture();
    let items = items(&f, 1, 2);
    let spec = KnockoutSpec {
        layer_groups: vec![vec![0, 9]],
        include_all_layers: false,
    };
    assert!(matches!(attention_knockout_sweep(&f.w, &items, &spec), Err(Error::Contract(_))));
}

#[test]
fn self_patching_is_neutral() {
    let f = fixture();
    let pairs = control_pairs(&f.world, &items(&f, 4000, 3)).unwrap();
    for task in [CmaTask::Localization, CmaTask::ClassificationBinary] {
        for pair in &pairs {
            let run = PairRun::new(&f.w, pair, task).unwrap();
            for l in 0..8 {
                for h in 0..8 {
                    let p = run.patched_perplexity(&f.w, HeadId::new(l, h), &run.base_trace).unwrap();
                    let mf = mediation_fraction(run.p_base, run.p_src, p).unwrap();
                    assert!(mf.abs() < 1e-9, "({l}, {h}) {mf}");
                }
            }
        }
    }
}

#[test]
fn self_pairs_are_excluded() {
    let f = fixture();
    let mut pairs = control_pairs(&f.world, &items(&f, 4100, 2)).unwrap();
    for p in &mut pairs {
        p.base = p.source.clone();
        p.pair.base = p.pair.source.clone();
        assert!(PairRun::new(&f.w, p, CmaTask::Localization).unwrap().is_excluded());
    }
    assert!(matches!(
        cma_sweep(&f.w, &pairs, CmaTask::Localization, 50),
        Err(Error::EmptyInput(_))
    ));
    assert!(hallucination_filter(&f.w, &pairs, CmaTask::Localization).unwrap().is_empty());
}

#[test]
fn cma_recovers_the_planted_heads() {
    let f = fixture();
    let pairs = control_pairs(&f.world, &items(&f, 5000, 20)).unwrap();
    let kept = hallucination_filter(&f.w, &pairs, CmaTask::Localization).unwrap();
    let rep = cma_sweep(&f.w, &kept, CmaTask::Localization, 20).unwrap();
    assert_eq!(rep.n_examples + rep.excluded, kept.len().min(20));
    let rank = HeadRanking::from_report(&rep);
    let mut top = rank.top(4);
    top.sort();
    assert_eq!(top, f.man.loc_head_ids());
    for h in f.man.loc_head_ids() {
        assert!(rep.mf[h.layer][h.head] > 0.5, "{h:?}");
    }
    assert!(rep.sparsity(0.05) >= 0.9);
    assert_eq!(HeadRanking::from_report(&rep.clone()), rank);

    let kept = hallucination_filter(&f.w, &pairs, CmaTask::ClassificationBinary).unwrap();
    let rep = cma_sweep(&f.w, &kept, CmaTask::ClassificationBinary, 20).unwrap();
    assert_eq!(HeadRanking::from_report(&rep).top(1), vec![f.man.cls_head]);
    assert!(rep.sparsity(0.05) >= 0.9);
    let csv = rep.to_csv();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("layer,head_0,"));
}

#[test]
fn heads_blind_to_the_image_do_not_mediate() {
    let f = fixture();
    let pairs = control_pairs(&f.world, &items(&f, 5100, 4)).unwrap();
    let mut checked = 0;
    for task in [CmaTask::Localization, CmaTask::ClassificationBinary] {
        for pair in &pairs {
            let run = PairRun::new(&f.w, pair, task).unwrap();
            let image = SYSTEM_LEN..SYSTEM_LEN + 64;
            let prompt_rows = image.end..run.base_trace.logits.rows();
            for l in 0..8 {
                for h in 0..8 {
                    let reads = |t: &ForwardTrace| {
                        let a = &t.attention[l][h];
                        prompt_rows.clone().any(|r| image.clone().any(|c| a.get2(r, c) > 1e-9))
                    };
                    if reads(&run.base_trace) || reads(&run.source_trace) {
                        continue;
                    }
                    let p = run.patched_perplexity(&f.w, HeadId::new(l, h), &run.source_trace).unwrap();
                    let mf = mediation_fraction(run.p_base, run.p_src, p).unwrap();
                    assert!(mf.abs() < 0.05, "({l}, {h}) {mf}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn cumulative_head_ablation() {
    let f = fixture();
    let pairs = control_pairs(&f.world, &items(&f, 5200, 10)).unwrap();
    let rep = cma_sweep(&f.w, &pairs, CmaTask::Localization, 10).unwrap();
    let rank = HeadRanking::from_report(&rep);
    let items = items(&f, 5300, 20);
    let base = evaluate(&f.w, &items, PromptSet::LOC_BINARY).unwrap();
    let crit = head_ablation_curve(&f.w, &items, &rank, HeadGroup::TaskCritical, &DEFAULT_FRACTIONS).unwrap();
    let low = head_ablation_curve(&f.w, &items, &rank, HeadGroup::LowImportance, &DEFAULT_FRACTIONS).unwrap();
    assert_eq!(crit.points[0].localization, base.localization.unwrap());
    let four = crit.points.iter().find(|p| p.n_heads == 4).unwrap();
    assert!(four.localization < 0.05);
    assert_eq!(four.classification, base.binary.unwrap());
    let same = low.points.iter().find(|p| p.n_heads == 4).unwrap();
    assert!((same.localization - base.localization.unwrap()).abs() <= 0.10);
    assert!(crit.normalized_auc < low.normalized_auc - 0.3);
    assert!(matches!(
        head_ablation_curve(&f.w, &items, &rank, HeadGroup::TaskCritical, &[0.0, 1.5]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn classification_heads_gate_localization() {
    let f = fixture();
    let items = items(&f, 5400, 20);
    let zero_cls = zero_heads_spec(&[f.man.cls_head]);
    let s = evaluate_with(&f.w, &items, PromptSet::LOC_BINARY, |_, _| Ok(zero_cls.clone())).unwrap();
    assert!(s.localization.unwrap() < 0.05);
    let zero_loc = zero_heads_spec(&f.man.loc_head_ids());
    let s = evaluate_with(&f.w, &items, PromptSet::LOC_BINARY, |_, _| Ok(zero_loc.clone())).unwrap();
    assert_eq!(s.binary, Some(1.0));
    assert!(s.localization.unwrap() < 0.05);

    let pairs = control_pairs(&f.world, &items).unwrap();
    let cls = HeadRanking::from_report(&cma_sweep(&f.w, &pairs, CmaTask::ClassificationBinary, 8).unwrap());
    let loc = HeadRanking::from_report(&cma_sweep(&f.w, &pairs, CmaTask::Localization, 8).unwrap());
    let report = cross_task_ablation(&f.w, &items, &cls, &loc, &[0.0, 1.0 / 64.0]).unwrap();
    assert_eq!(report.points[0].localization, 1.0);
    assert!(report.points[1].localization < 0.05);
    assert!(report.top10_overlap <= 10);
}
