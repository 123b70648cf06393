// SPDX-License-Identifier: MIT OR Apache-2.0

use boxcircuit_core::gridworld::{GenParams, TokenGrid, World};
use boxcircuit_core::model::{ModelConfig, ModelWeights};
use boxcircuit_core::numerics::DenseArray;
use boxcircuit_core::planted::{plant_model, PlantParams};
use boxcircuit_core::probes::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (World, ModelWeights) {
    let world = World::new(GenParams::default()).unwrap();
    let (w, _) = plant_model(&ModelConfig::default(), &world, &PlantParams::default()).unwrap();
    (world, w)
}

fn grids(world: &World, first: u64, n: usize) -> Vec<TokenGrid> {
    (first..first + n as u64)
        .map(|s| world.render_tokens(&world.generate_scene(s).unwrap(), s))
        .collect()
}

#[test]
fn dataset_shape_and_embedding_definition() {
    let (world, w) = setup();
    let g = grids(&world, 0, 3);
    let ds = collect_activations(&w, &g, &[LayerTag::Projection, LayerTag::Embedding]).unwrap();
    assert_eq!(ds[0].len(), 3 * 64);
    assert_eq!(ds[1].dim(), w.config.d_model);
    let start = boxcircuit_core::model::SYSTEM_LEN;
    for i in 0..ds[0].len() {
        let cell = ds[0].rows[i] * 8 + ds[0].cols[i];
        assert_eq!(cell, i % 64);
        let pe = w.positional_embedding.row(start + cell);
        for ((e, p), q) in ds[1].row(i).iter().zip(ds[0].row(i)).zip(pe) {
            assert!((e - (p + q)).abs() < 1e-12);
        }
    }
    let again = collect_activations(&w, &g, &[LayerTag::Embedding]).unwrap();
    assert_eq!(again[0].rows, ds[1].rows);
    assert!((0..ds[1].len()).all(|i| again[0].row(i) == ds[1].row(i)));
    assert!(collect_activations(&w, &g, &[LayerTag::Residual(8)]).is_err());
}

#[test]
fn embedding_positions_are_separable_and_shuffles_are_chance() {
    let (world, w) = setup();
    let train = collect_activations(&w, &grids(&world, 100, 150), &[LayerTag::Embedding]).unwrap().remove(0);
    let test = collect_activations(&w, &grids(&world, 10_000, 60), &[LayerTag::Embedding]).unwrap().remove(0);
    let p = probe_layer(&train, &test, DEFAULT_EPOCHS, 7).unwrap();
    assert_eq!(p.joint_accuracy, 1.0);

    let (shuffled, shuffled_test) = (train.with_shuffled_labels(3), test.with_shuffled_labels(4));
    for axis in [Axis::Row, Axis::Column] {
        let r = train_probe(&shuffled, &shuffled_test, axis, DEFAULT_EPOCHS, 1).unwrap();
        assert!((r.test_accuracy - 1.0 / 8.0).abs() < 0.03, "{axis:?} {}", r.test_accuracy);
    }
}

#[test]
fn noise_activations_decode_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let data: Vec<f64> = (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows = (0..n).map(|i| (i / 8) % 8).collect();
        let cols = (0..n).map(|i| i % 8).collect();
        ProbeDataset::new(LayerTag::Embedding, 8, &DenseArray::new(vec![n, 16], data).unwrap(), rows, cols).unwrap()
    };
    let (train, test) = (make(&mut rng, 6400), make(&mut rng, 6400));
    for axis in [Axis::Row, Axis::Column] {
        let acc = train_probe(&train, &test, axis, DEFAULT_EPOCHS, 2).unwrap().test_accuracy;
        // three binomial standard deviations at n = 6400
        assert!((acc - 0.125).abs() < 3.0 * (0.125f64 * 0.875 / 6400.0).sqrt(), "{acc}");
    }
}

#[test]
fn row_probes_ignore_column_relabeling() {
    let (world, w) = setup();
    let train = collect_activations(&w, &grids(&world, 200, 40), &[LayerTag::Residual(3)]).unwrap().remove(0);
    let test = collect_activations(&w, &grids(&world, 300, 20), &[LayerTag::Residual(3)]).unwrap().remove(0);
    let a = train_probe(&train, &test, Axis::Row, 4, 5).unwrap();
    let mut relabeled = train.clone();
    relabeled.cols = train.cols.iter().map(|c| (c + 3) % 8).collect();
    let b = train_probe(&relabeled, &test, Axis::Row, 4, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn curve_is_consistent_and_reproducible() {
    let (world, w) = setup();
    let train = grids(&world, 400, 30);
    let test = grids(&world, 500, 10);
    let c = probe_curve(&w, &train, &test, 4, 11).unwrap();
    assert_eq!(c.layers.len(), 2 + w.config.n_layers);
    for l in &c.layers {
        let mean = l.per_position.iter().sum::<f64>() / l.per_position.len() as f64;
        assert!((mean - l.joint_accuracy).abs() < 1e-12);
        assert!(l.per_position.iter().all(|a| (0.0..=1.0).contains(a)));
    }
    // the planted coordinate heads sit in layer 5
    assert!(matches!(c.layers[c.best].tag, LayerTag::Embedding | LayerTag::Residual(0..=5)));
    let h = c.heatmap();
    assert_eq!((h.len(), h[0].len()), (8, 8));
    assert_eq!(c.curve_csv().lines().count(), 1 + 3 * c.layers.len());
    assert_eq!(probe_curve(&w, &train, &test, 4, 11).unwrap(), c);
}

#[test]
fn more_data_does_not_hurt_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 40;
    let truth: Vec<f64> = (0..d * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut make = |n: usize| {
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows: Vec<usize> = (0..n)
            .map(|i| {
                let x = &data[i * d..(i + 1) * d];
                let scores: Vec<f64> = (0..4)
                    .map(|k| (0..d).map(|j| x[j] * truth[j * 4 + k]).sum::<f64>() + rng.gen_range(-1.0..1.0))
                    .collect();
                boxcircuit_core::model::argmax(&scores)
            })
            .collect();
        ProbeDataset::new(LayerTag::Embedding, 4, &DenseArray::new(vec![n, d], data).unwrap(), rows, vec![0; n]).unwrap()
    };
    let (full, test) = (make(240), make(4000));
    let (mut a_full, mut a_half) = (0.0, 0.0);
    for seed in 0..5 {
        a_full += train_probe(&full, &test, Axis::Row, DEFAULT_EPOCHS, seed).unwrap().test_accuracy;
        let half = full.subsample(120, seed).unwrap();
        a_half += train_probe(&half, &test, Axis::Row, DEFAULT_EPOCHS, seed).unwrap().test_accuracy;
    }
    assert!(a_full >= a_half, "{a_full} {a_half}");
}
