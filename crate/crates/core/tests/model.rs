// SPDX-License-Identifier: MIT OR Apache-2.0

use boxcircuit_core::gridworld::{GenParams, World};
use boxcircuit_core::model::{
    assemble_input, forward, forward_taped, generate, load_checkpoint, save_checkpoint, teacher_forced_perplexity,
    CorpusManifest, InterventionPlan, InterventionSpec, ModelConfig, ModelWeights, PositionSet, Prompt, Session,
    VisualAdapter, WeightVars, embed_taped,
};
use boxcircuit_core::numerics::{DenseArray, Tape};
use boxcircuit_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(layer_norm: bool, seed: u64) -> (World, ModelWeights) {
    let world = World::new(GenParams::default()).unwrap();
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_mlp: 16,
        layer_norm,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = DenseArray::new(
        vec![config.d_vis, config.d_model],
        (0..config.d_vis * config.d_model).map(|_| rng.gen_range(-0.3..0.3)).collect(),
    )
    .unwrap();
    let adapter = VisualAdapter::new(proj, &world, CorpusManifest { seed: 1, scenes: 4 }).unwrap();
    let w = ModelWeights::random(&config, adapter, seed).unwrap();
    (world, w)
}

fn input_for(world: &World, w: &ModelWeights, seed: u64, prompt: Prompt) -> boxcircuit_core::model::ModelInput {
    let scene = world.generate_scene(seed).unwrap();
    let grid = world.render_tokens(&scene, seed);
    assemble_input(w, &grid, prompt).unwrap()
}

#[test]
fn image_slot_is_g_squared_and_capacity_is_enforced() {
    let (world, w) = small(false, 1);
    let inp = input_for(&world, &w, 3, Prompt::localize(2));
    assert_eq!(inp.image_range.len(), 64);
    assert_eq!(inp.embeddings.rows(), inp.len());
    let mut tight = w.clone();
    tight.config.max_seq = 70;
    let scene = world.generate_scene(3).unwrap();
    let grid = world.render_tokens(&scene, 3);
    assert!(matches!(
        assemble_input(&tight, &grid, Prompt::localize(2)),
        Err(Error::Capacity(_))
    ));
}

#[test]
fn chunked_matches_full_forward() {
    for ln in [false, true] {
        let (world, w) = small(ln, 2);
        let inp = input_for(&world, &w, 5, Prompt::binary(1));
        let full = forward(&w, &inp, &[], false).unwrap().logits;
        let mut s = Session::new(&w, &[], false).unwrap();
        let a = s.extend(&inp.embeddings.slice_rows(0, 30)).unwrap();
        let b = s.extend(&inp.embeddings.slice_rows(30, inp.len())).unwrap();
        let joined: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in joined.iter().zip(full.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn self_patch_is_bit_identical() {
    let (world, w) = small(true, 3);
    let inp = input_for(&world, &w, 7, Prompt::localize(0));
    let out = forward(&w, &inp, &[], true).unwrap();
    let trace = out.trace.unwrap();
    for layer in 0..2 {
        for head in 0..2 {
            let positions: Vec<usize> = (0..inp.len()).collect();
            let spec = InterventionSpec::PatchHeadOutput {
                layer,
                head,
                positions,
                values: trace.head_outputs[layer][head].clone(),
            };
            let patched = forward(&w, &inp, &[spec], false).unwrap();
            assert_eq!(patched.logits, out.logits);
        }
    }
    let again = forward(&w, &inp, &[], true).unwrap().trace.unwrap();
    assert_eq!(again, trace);
}

#[test]
fn blocked_attention_rows_renormalize() {
    let (world, w) = small(false, 4);
    let inp = input_for(&world, &w, 9, Prompt::localize(0));
    let img: Vec<usize> = inp.image_range.clone().collect();
    let spec = InterventionSpec::BlockAttention {
        layers: vec![1],
        from: PositionSet::From(inp.image_range.end),
        to: img.clone(),
    };
    let trace = forward(&w, &inp, &[spec], true).unwrap().trace.unwrap();
    for h in 0..2 {
        let a = &trace.attention[1][h];
        for i in inp.image_range.end..inp.len() {
            assert!(img.iter().all(|&j| a.get2(i, j) == 0.0));
            let s: f64 = a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn blocking_image_in_all_layers_hides_scene_content() {
    let (world, w) = small(true, 5);
    let a = input_for(&world, &w, 11, Prompt::localize(0));
    let b = input_for(&world, &w, 12, Prompt::localize(0));
    let spec = InterventionSpec::BlockAttention {
        layers: vec![0, 1],
        from: PositionSet::From(a.image_range.end),
        to: a.image_range.clone().collect(),
    };
    let la = forward(&w, &a, std::slice::from_ref(&spec), false).unwrap().logits;
    let lb = forward(&w, &b, &[spec], false).unwrap().logits;
    let last = a.len() - 1;
    assert_eq!(la.row(last), lb.row(last));
}

#[test]
fn taped_forward_agrees_with_eager() {
    for ln in [false, true] {
        let (world, w) = small(ln, 6);
        let inp = input_for(&world, &w, 13, Prompt::list());
        let specs = vec![
            InterventionSpec::ZeroHeadOutput {
                layer: 0,
                head: 1,
                positions: PositionSet::From(10),
            },
            InterventionSpec::ShuffleTokens {
                positions: vec![2, 3, 4],
                permutation: vec![1, 2, 0],
            },
            InterventionSpec::BlockAttention {
                layers: vec![1],
                from: PositionSet::List(vec![70, 71]),
                to: vec![5, 6],
            },
        ];
        let eager = forward(&w, &inp, &specs, false).unwrap().logits;
        let mut tape = Tape::new();
        let wv = WeightVars::record(&mut tape, &w).unwrap();
        let rows = embed_taped(&mut tape, &wv, &inp, None).unwrap();
        let plan = InterventionPlan::new(&w.config, &specs).unwrap();
        let out = forward_taped(&mut tape, &wv, &w, rows, &plan, ln).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(eager.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let (world, w) = small(true, 7);
    let inp = input_for(&world, &w, 15, Prompt::localize(1));
    let a = generate(&w, &inp, 6).unwrap();
    assert_eq!(a, generate(&w, &inp, 6).unwrap());
    assert!(!a.is_empty() && a.len() <= 6);
}

#[test]
fn perplexity_is_at_least_one_and_rejects_full_mask() {
    let (world, w) = small(false, 8);
    let inp = input_for(&world, &w, 17, Prompt::binary(1));
    let v = w.vocab();
    let p = teacher_forced_perplexity(&w, &inp, &[v.yes(), v.eos()], &[false, true], &[]).unwrap();
    assert!(p >= 1.0);
    assert!(matches!(
        teacher_forced_perplexity(&w, &inp, &[v.yes(), v.eos()], &[true, true], &[]),
        Err(Error::EmptySupport(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_, w) = small(true, 9);
    let dir = std::env::temp_dir().join(format!("bc-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("w.bin");
    save_checkpoint(&w, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, w);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}
