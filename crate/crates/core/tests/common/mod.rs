// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

//! Finite-difference checks of tape gradients over small random graphs.

use boxcircuit_core::numerics::{DenseArray, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const R: usize = 3;
const C: usize = 4;
const K: usize = 3;
pub const N_OPS: u8 = 14;
const REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

/// Leaves: h0 (R×C), y (R×C), m (C×K), v, g, b (C), w (R×C).
pub fn leaves(seed: u64) -> Vec<DenseArray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arr = |shape: Vec<usize>| {
        let n = shape.iter().product();
        DenseArray::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    };
    vec![
        arr(vec![R, C]),
        arr(vec![R, C]),
        arr(vec![C, K]),
        arr(vec![C]),
        arr(vec![C]),
        arr(vec![C]),
        arr(vec![R, C]),
    ]
}

fn step(t: &mut Tape, op: u8, h: Var, l: &[Var], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        0 => t.add(h, l[1]),
        1 => t.sub(h, l[1]),
        2 => t.mul(h, l[1]),
        3 => t.add_row(h, l[3]),
        4 => t.scale(h, -0.7),
        5 => {
            // keep finite differences away from the kink
            if t.value(h).data().iter().any(|x| x.abs() < 1e-3) {
                t.gelu(h)
            } else {
                t.relu(h)
            }
        }
        6 => t.gelu(h),
        7 => {
            let s = t.scale(h, 0.3).unwrap();
            t.exp(s)
        }
        8 => t.softmax_rows(h),
        9 => t.log_softmax_rows(h),
        10 => t.layer_norm(h, l[4], l[5]),
        11 => {
            let p = t.matmul(h, l[2]).unwrap();
            let mt = t.transpose(l[2]).unwrap();
            t.matmul(p, mt)
        }
        12 => {
            let split = rng.gen_range(1..C);
            let a = t.slice_cols(h, 0, split).unwrap();
            let b = t.slice_cols(h, split, C - split).unwrap();
            t.concat_cols(&[b, a])
        }
        13 => {
            let both = t.concat_rows(&[h, l[1]]).unwrap();
            let idx: Vec<usize> = (0..R).map(|_| rng.gen_range(0..2 * R)).collect();
            t.gather_rows(both, &idx)
        }
        _ => unreachable!(),
    }
    .unwrap()
}

/// Builds the chain and reduces it with either a weighted sum or a pick.
pub fn build(program: &[u8], values: &[DenseArray], seed: u64) -> (Tape, Var, Vec<Var>) {
    let mut t = Tape::new();
    let l: Vec<Var> = values.iter().map(|v| t.input(v.clone()).unwrap()).collect();
    let mut h = l[0];
    for (i, &op) in program.iter().enumerate() {
        h = step(&mut t, op, h, &l, seed.wrapping_add(i as u64));
    }
    let out = if seed.is_multiple_of(2) {
        let p = t.mul(h, l[6]).unwrap();
        t.sum(p).unwrap()
    } else {
        let picks = t.pick(h, &[(0, 1), (R - 1, C - 1), (1, 0), (0, 1)]).unwrap();
        t.sum(picks).unwrap()
    };
    (t, out, l)
}

fn scalar(program: &[u8], values: &[DenseArray], seed: u64) -> f64 {
    let (t, out, _) = build(program, values, seed);
    t.value(out).data()[0]
}

fn nudged(values: &[DenseArray], leaf: usize, k: usize, by: f64) -> Vec<DenseArray> {
    let mut out = values.to_vec();
    let mut data = out[leaf].data().to_vec();
    data[k] += by;
    out[leaf] = DenseArray::new(out[leaf].shape().to_vec(), data).unwrap();
    out
}

/// Fails on the first entry with `|analytic − numeric| > tol·max(|analytic|, |numeric|, 1e-3)`.
pub fn check(program: &[u8], seed: u64) -> std::result::Result<(), String> {
    let values = leaves(seed);
    let (mut t, out, l) = build(program, &values, seed);
    let grads = t.backward(out).unwrap();
    for (li, v) in l.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for k in 0..values[li].len() {
            let (plus, minus) = (nudged(&values, li, k, FD_STEP), nudged(&values, li, k, -FD_STEP));
            let numeric = (scalar(program, &plus, seed) - scalar(program, &minus, seed)) / (2.0 * FD_STEP);
            let a = analytic.data()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            if (a - numeric).abs() > REL_TOL * scale {
                return Err(format!("program {program:?} leaf {li}[{k}]: analytic {a} vs numeric {numeric}"));
            }
        }
    }
    Ok(())
}
