// SPDX-License-Identifier: MIT OR Apache-2.0

use boxcircuit_core::eval::sample_items;
use boxcircuit_core::gridworld::{GenParams, World};
use boxcircuit_core::model::{CorpusManifest, ModelConfig};
use boxcircuit_core::training::*;
use boxcircuit_core::Error;

fn tiny() -> (World, ModelConfig) {
    let world = World::new(GenParams::default()).unwrap();
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 24,
        d_mlp: 32,
        ..ModelConfig::default()
    };
    (world, config)
}

fn data(world: &World, config: &ModelConfig, n: usize) -> Vec<TrainExample> {
    examples_from_items(config, &sample_items(world, 77, n).unwrap()).unwrap()
}

fn adapter(world: &World, config: &ModelConfig) -> boxcircuit_core::model::VisualAdapter {
    random_adapter(config, world, CorpusManifest { seed: 1, scenes: 4 }, 3).unwrap()
}

#[test]
fn memorizes_a_single_scene() {
    let (world, config) = tiny();
    let data = data(&world, &config, 1);
    let params = TrainParams {
        steps: 120,
        batch_size: 2,
        learning_rate: 0.05,
        momentum: 0.9,
        clip_norm: Some(5.0),
    };
    let (_, report) = train_model(&config, adapter(&world, &config), &data, &params, 4).unwrap();
    assert!(report.final_loss < report.initial_loss);
    assert_eq!(report.final_accuracy, 1.0, "{report:?}");
    assert_eq!(report.losses.len(), 120);
}

#[test]
fn training_is_deterministic() {
    let (world, config) = tiny();
    let data = data(&world, &config, 3);
    let params = TrainParams {
        steps: 5,
        batch_size: 2,
        ..TrainParams::default()
    };
    let a = train_model(&config, adapter(&world, &config), &data, &params, 9).unwrap();
    let b = train_model(&config, adapter(&world, &config), &data, &params, 9).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let c = train_model(&config, adapter(&world, &config), &data, &params, 10).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn divergence_returns_the_last_finite_weights() {
    let (world, config) = tiny();
    let data = data(&world, &config, 2);
    let params = TrainParams {
        steps: 50,
        batch_size: 2,
        learning_rate: 1e150,
        momentum: 0.0,
        clip_norm: None,
    };
    match train_model(&config, adapter(&world, &config), &data, &params, 1) {
        Err(Error::TrainingDiverged { last_finite, .. }) => assert!(last_finite.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn rejects_empty_data_and_bad_params() {
    let (world, config) = tiny();
    let ad = adapter(&world, &config);
    assert!(matches!(
        train_model(&config, ad.clone(), &[], &TrainParams::default(), 0),
        Err(Error::EmptyInput(_))
    ));
    let d = data(&world, &config, 1);
    let bad = TrainParams {
        momentum: 1.0,
        ..TrainParams::default()
    };
    assert!(matches!(train_model(&config, ad, &d, &bad, 0), Err(Error::Config(_))));
}
