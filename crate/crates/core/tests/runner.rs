// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;

use boxcircuit_core::runner::{run_experiment, ExperimentConfig, ExperimentKind, RunRecord, RECORD_FILE};
use boxcircuit_core::Error;

fn config(text: &str, out: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(text).unwrap();
    c.out = Some(out.to_path_buf());
    c
}

#[test]
fn unknown_keys_are_rejected_at_any_depth() {
    for text in [
        "sed = 1",
        "[scenes]\ncont = 3",
        "[model.config]\nlayers = 3",
        "[ablate.table]\npadding = [0]",
        "[world]\ngrid = 8",
        "[train]\nlr = 0.1",
    ] {
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
    assert!(ExperimentConfig::from_toml("").is_ok());
}

#[test]
fn kinds_round_trip_through_their_names() {
    for k in ExperimentKind::ALL {
        assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
    }
    assert!("plot".parse::<ExperimentKind>().is_err());
}

#[test]
fn hash_ignores_output_but_not_parameters() {
    let a = ExperimentConfig::from_toml("seed = 1").unwrap();
    let mut b = a.clone();
    b.out = Some("elsewhere".into());
    assert_eq!(a.hash(ExperimentKind::Eval).unwrap(), b.hash(ExperimentKind::Eval).unwrap());
    assert_ne!(a.hash(ExperimentKind::Eval).unwrap(), a.hash(ExperimentKind::Cma).unwrap());
    b.scenes.count += 1;
    assert_ne!(a.hash(ExperimentKind::Eval).unwrap(), b.hash(ExperimentKind::Eval).unwrap());
}

#[test]
fn missing_inputs_and_kind_mismatch_fail_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("c.toml"), "[scenes]\nmanifest = \"absent.jsonl\"\n").unwrap();
    assert!(matches!(ExperimentConfig::load(&dir.join("c.toml")), Err(Error::Config(_))));

    let c = config("kind = \"probe\"", &dir.join("o"));
    assert!(matches!(run_experiment(&c, ExperimentKind::Eval), Err(Error::Config(_))));
    assert!(!dir.join("o").exists());

    let mut c = config("", &dir.join("o"));
    c.out = None;
    assert!(matches!(run_experiment(&c, ExperimentKind::Eval), Err(Error::Config(_))));
}

#[test]
fn manifest_and_world_together_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = config("[scenes]\ncount = 3", &tmp.path().join("gen"));
    run_experiment(&gen, ExperimentKind::Gen).unwrap();
    let text = format!(
        "[scenes]\nmanifest = {:?}\n[world]\ngrid_size = 8\n",
        tmp.path().join("gen/scenes.jsonl")
    );
    let c = config(&text, &tmp.path().join("eval"));
    assert!(matches!(run_experiment(&c, ExperimentKind::Eval), Err(Error::Experiment { .. })));
}

#[test]
fn failures_leave_an_incomplete_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cma");
    let c = config("[scenes]\ncount = 2\n[cma]\ntasks = []\n", &out);
    let err = run_experiment(&c, ExperimentKind::Cma).unwrap_err();
    assert!(matches!(err, Error::Experiment { ref kind, .. } if kind == "cma"), "{err}");
    let record: RunRecord = serde_json::from_str(&fs::read_to_string(out.join(RECORD_FILE)).unwrap()).unwrap();
    assert!(!record.complete);
    assert!(record.error.unwrap().contains("cma.tasks"));
}

#[test]
fn eval_record_lists_digests_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eval");
    let c = config("seed = 5\n[scenes]\ncount = 6\n[eval]\nlist = false\n", &out);
    let record = run_experiment(&c, ExperimentKind::Eval).unwrap();
    assert!(record.complete);
    let names: Vec<&str> = record.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["per_item.csv", "scores.json"]);
    for f in &record.files {
        assert_eq!(fs::read(out.join(&f.path)).unwrap().len(), f.bytes);
        assert_eq!(f.sha256.len(), 64);
    }
    assert!(record.seeds.contains_key("scenes_first_seed"));
    let scores: serde_json::Value = serde_json::from_slice(&fs::read(out.join("scores.json")).unwrap()).unwrap();
    assert_eq!(scores["localization"], 1.0);
    assert!(scores["list"].is_null());
    assert!(record.summary_table().contains("localization"));
}

#[test]
fn example_config_parses_with_defaults() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let c = ExperimentConfig::load(&path).unwrap();
    let d = ExperimentConfig::default();
    assert_eq!(c.ablate, d.ablate);
    assert_eq!(c.cma, d.cma);
    assert_eq!(c.head_ablate, d.head_ablate);
    assert_eq!(c.train, d.train);
    assert_eq!(c.model.config, d.model.config);
    assert_eq!(c.world, Some(Default::default()));
    assert!(c.out.unwrap().ends_with("../runs/example"));
}
