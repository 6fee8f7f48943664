//! Test-only oracles shared by the integration suites.

#![allow(dead_code)]

pub mod fixtures;
pub mod gradcases;

use adapt2::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest step of the finite-difference ladder. Kinked cases keep their
/// inputs further than this from the kink; steps only shrink from here.
pub const FD_STEP: f32 = 1e-2;
const LADDER_SHRINK: f64 = 1.4;
const LADDER_LEN: usize = 8;
/// Gradients whose largest entry is below this are compared on an absolute
/// scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Probe weights used to reduce any output to a scalar: `sum(w * out)`.
fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed ^ 0x9e37_79b9);
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.5f32..1.5);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Evaluates `sum(w * build(inputs))` in f64 from the f32 forward values.
fn probe_value<F>(inputs: &[Tensor], build: &F, w: &Tensor) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> adapt2::tensor::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out)
        .data()
        .iter()
        .zip(w.data())
        .map(|(&o, &wv)| o as f64 * wv as f64)
        .sum()
}

/// Maximum relative error between backward and central finite differences.
///
/// The numeric side is a Ridders-extrapolated central difference. The error
/// is normwise over the full gradient (every element of every input): the
/// largest elementwise deviation divided by the largest gradient magnitude.
pub fn max_rel_error<F>(inputs: &[Tensor], build: F, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> adapt2::tensor::Result<Var>,
{
    rel_error_with(inputs, build, seed, None)
}

/// Same comparison with a single central difference at a fixed step.
pub fn max_rel_error_at_step<F>(inputs: &[Tensor], build: F, seed: u64, step: f32) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> adapt2::tensor::Result<Var>,
{
    rel_error_with(inputs, build, seed, Some(step))
}

#[allow(clippy::needless_range_loop)]
fn rel_error_with<F>(inputs: &[Tensor], build: F, seed: u64, fixed_step: Option<f32>) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> adapt2::tensor::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let w = probe_weights(g.value(out).shape(), seed);
    let wv = g.constant(w.clone());
    let weighted = g.mul(out, wv).expect("probe mul");
    let loss = g.sum(weighted).expect("probe sum");
    let grads = g.backward(loss).expect("backward");

    let (mut deviation, mut scale) = (0.0f64, REL_FLOOR);
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .of(vars[i])
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let central = |h: f32| {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let x = t.data()[j];
                plus[i].data_mut()[j] = x + h;
                minus[i].data_mut()[j] = x - h;
                let step = (plus[i].data()[j] as f64) - (minus[i].data()[j] as f64);
                (probe_value(&plus, &build, &w) - probe_value(&minus, &build, &w)) / step
            };
            let numeric = match fixed_step {
                Some(h) => central(h),
                None => ridders(central),
            };
            let a = analytic[j] as f64;
            deviation = deviation.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
    }
    deviation / scale
}

/// Ridders' extrapolation of central differences over a shrinking step ladder.
///
/// Large steps swamp f32 rounding in the forward pass; small steps survive
/// ill-conditioned points. The tableau picks the entry with the smallest
/// internal error estimate, independent of the analytic gradient.
fn ridders(central: impl Fn(f32) -> f64) -> f64 {
    let shrink2 = LADDER_SHRINK * LADDER_SHRINK;
    let mut h = FD_STEP as f64;
    let mut prev = vec![central(h as f32)];
    let mut best = prev[0];
    let mut best_err = f64::INFINITY;
    for i in 1..LADDER_LEN {
        h /= LADDER_SHRINK;
        let mut row = vec![central(h as f32)];
        let mut fac = shrink2;
        for k in 1..=i {
            let v = (row[k - 1] * fac - prev[k - 1]) / (fac - 1.0);
            fac *= shrink2;
            let err = (v - row[k - 1]).abs().max((v - prev[k - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = v;
            }
            row.push(v);
        }
        // Higher orders have stopped helping; rounding now dominates.
        if (row[i] - prev[i - 1]).abs() >= 2.0 * best_err {
            break;
        }
        prev = row;
    }
    best
}
