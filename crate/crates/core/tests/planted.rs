// SPDX-License-Identifier: MIT OR Apache-2.0

use boxcircuit_core::gridworld::{GenParams, World};
use boxcircuit_core::metrics::parse_box_answer;
use boxcircuit_core::model::{assemble_input, generate, ModelConfig, Prompt};
use boxcircuit_core::planted::{plant_model, PlantParams};

#[test]
fn planted_answers_are_exact() {
    let world = World::new(GenParams::default()).unwrap();
    let (w, _) = plant_model(&ModelConfig::default(), &world, &PlantParams::default()).unwrap();
    let v = w.vocab();
    for seed in 0..100u64 {
        let scene = world.generate_scene(seed).unwrap();
        let grid = world.render_tokens(&scene, seed);
        for o in &scene.objects {
            let inp = assemble_input(&w, &grid, Prompt::localize(o.class_id)).unwrap();
            let out = generate(&w, &inp, 12).unwrap();
            let b = parse_box_answer(&out, &v);
            assert_eq!(b, Ok(o.bbox), "seed {seed}: {}", v.decode(&out));
            let inp = assemble_input(&w, &grid, Prompt::binary(o.class_id)).unwrap();
            assert_eq!(generate(&w, &inp, 3).unwrap(), vec![v.yes(), v.eos()]);
        }
        let absent = (0..10).find(|c| scene.object(*c).is_none()).unwrap();
        let inp = assemble_input(&w, &grid, Prompt::binary(absent)).unwrap();
        assert_eq!(generate(&w, &inp, 3).unwrap(), vec![v.no(), v.eos()], "seed {seed}");
        let inp = assemble_input(&w, &grid, Prompt::list()).unwrap();
        let mut want: Vec<usize> = scene.objects.iter().map(|o| v.class(o.class_id)).collect();
        want.sort_unstable();
        want.push(v.eos());
        assert_eq!(generate(&w, &inp, 12).unwrap(), want, "seed {seed}");
    }
}
