//! One randomized finite-difference case per tensor primitive, plus small
//! composite networks.

use adapt2::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{away_from_zero, max_rel_error, max_rel_error_at_step, rng, uniform};

pub type Case = fn(u64) -> f64;

pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("scale", scale),
        ("matmul", matmul),
        ("conv1d", conv1d),
        ("max_pool1d", max_pool1d),
        ("global_mean_pool", global_mean_pool),
        ("relu", relu),
        ("tanh", tanh),
        ("sigmoid", sigmoid),
        ("layer_norm", layer_norm),
        ("concat", concat),
        ("slice", slice),
        ("transpose", transpose),
        ("reshape", reshape),
        ("softmax", softmax),
        ("log", log),
        ("exp", exp),
        ("sum", sum),
        ("mean", mean),
        ("cosine_similarity", cosine_similarity),
        ("cross_entropy_with_logits", cross_entropy),
        ("binary_cross_entropy_with_logits", bce),
    ]
}

pub fn network_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("two_layer_mlp", two_layer_mlp),
        ("conv_net", conv_net),
        ("gated_recurrent_infonce", gated_recurrent),
    ]
}

fn add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    max_rel_error(&[a, b], |g, v| g.add(v[0], v[1]), seed)
}

fn sub(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3], -1.0, 1.0);
    max_rel_error(&[a, b], |g, v| g.sub(v[0], v[1]), seed)
}

fn mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 2], -1.0, 1.0);
    max_rel_error(&[a, b], |g, v| g.mul(v[0], v[1]), seed)
}

fn scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[5], -1.0, 1.0);
    let s = r.gen_range(-2.0f32..2.0);
    max_rel_error(&[a], move |g, v| g.scale(v[0], s), seed)
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4));
    let a = uniform(&mut r, &[m, k], -1.0, 1.0);
    let b = uniform(&mut r, &[k, n], -1.0, 1.0);
    max_rel_error(&[a, b], |g, v| g.matmul(v[0], v[1]), seed)
}

fn conv1d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
    let kernel = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    let padding = r.gen_range(0..2);
    let len = r.gen_range(kernel.max(3)..8);
    let x = uniform(&mut r, &[n, cin, len], -1.0, 1.0);
    let w = uniform(&mut r, &[cout, cin, kernel], -1.0, 1.0);
    let b = uniform(&mut r, &[cout], -1.0, 1.0);
    max_rel_error(
        &[x, w, b],
        move |g, v| g.conv1d(v[0], v[1], v[2], stride, padding),
        seed,
    )
}

fn max_pool1d(seed: u64) -> f64 {
    let mut r = rng(seed);
    // Distinct values on a coarse grid so finite differences never swap the argmax.
    let mut grid: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.6).collect();
    grid.shuffle(&mut r);
    let x = Tensor::new(vec![2, 6], grid).unwrap();
    max_rel_error(&[x], |g, v| g.max_pool1d(v[0], 2, 2), seed)
}

fn global_mean_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    max_rel_error(&[x], |g, v| g.global_mean_pool(v[0]), seed)
}

fn relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[6], 0.05, 1.0);
    max_rel_error(&[x], |g, v| g.relu(v[0]), seed)
}

fn tanh(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[6], -2.0, 2.0);
    max_rel_error(&[x], |g, v| g.tanh(v[0]), seed)
}

fn sigmoid(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[6], -3.0, 3.0);
    max_rel_error(&[x], |g, v| g.sigmoid(v[0]), seed)
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let dims = r.gen_range(1..3);
    max_rel_error(&[x], move |g, v| g.layer_norm(v[0], dims), seed)
}

fn concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 1, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
    max_rel_error(&[a, b], |g, v| g.concat(&[v[0], v[1]], 1), seed)
}

fn slice(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 5, 2], -1.0, 1.0);
    let start = r.gen_range(0..4);
    max_rel_error(&[x], move |g, v| g.slice(v[0], 1, start, 5 - start), seed)
}

fn transpose(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    max_rel_error(&[x], |g, v| g.transpose(v[0]), seed)
}

fn reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 6], -1.0, 1.0);
    max_rel_error(&[x], |g, v| g.reshape(v[0], &[3, 4]), seed)
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 4], -2.0, 2.0);
    max_rel_error(&[x], |g, v| g.softmax(v[0]), seed)
}

fn log(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[5], 0.5, 2.0);
    max_rel_error(&[x], |g, v| g.log(v[0]), seed)
}

fn exp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[5], -1.5, 1.5);
    max_rel_error(&[x], |g, v| g.exp(v[0]), seed)
}

fn sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3], -1.0, 1.0);
    max_rel_error(&[x], |g, v| g.sum(v[0]), seed)
}

fn mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[4, 2], -1.0, 1.0);
    max_rel_error(&[x], |g, v| g.mean(v[0]), seed)
}

fn cosine_similarity(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = away_from_zero(&mut r, &[3, 4], 0.2, 1.0);
    let b = away_from_zero(&mut r, &[2, 4], 0.2, 1.0);
    max_rel_error(&[a, b], |g, v| g.cosine_similarity(v[0], v[1]), seed)
}

fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[4, 3], -2.0, 2.0);
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
    max_rel_error(
        &[x],
        move |g, v| g.cross_entropy_with_logits(v[0], &targets),
        seed,
    )
}

fn bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 2], -3.0, 3.0);
    let y = Tensor::from_fn(&[3, 2], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    max_rel_error(
        &[x],
        move |g, v| g.binary_cross_entropy_with_logits(v[0], &y),
        seed,
    )
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> adapt2::tensor::Result<Var> {
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

fn two_layer_mlp(seed: u64) -> f64 {
    let (inputs, y) = mlp_inputs(seed);
    max_rel_error(&inputs, move |g, v| mlp_loss(g, v, &y), seed)
}

/// The two-layer network against a plain central difference with h = 1e-3.
pub fn two_layer_mlp_fixed_step(seed: u64) -> f64 {
    let (inputs, y) = mlp_inputs(seed);
    max_rel_error_at_step(&inputs, move |g, v| mlp_loss(g, v, &y), seed, 1e-3)
}

fn mlp_inputs(seed: u64) -> (Vec<Tensor>, Tensor) {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let w1 = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let b1 = uniform(&mut r, &[5], -0.5, 0.5);
    let w2 = uniform(&mut r, &[5, 2], -1.0, 1.0);
    let b2 = uniform(&mut r, &[2], -0.5, 0.5);
    let y = Tensor::from_fn(&[4, 2], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    (vec![x, w1, b1, w2, b2], y)
}

fn mlp_loss(g: &mut Graph, v: &[Var], y: &Tensor) -> adapt2::tensor::Result<Var> {
    let h = dense(g, v[0], v[1], v[2])?;
    let h = g.tanh(h)?;
    let o = dense(g, h, v[3], v[4])?;
    g.binary_cross_entropy_with_logits(o, y)
}

fn conv_net(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 8], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -0.5, 0.5);
    let wc = uniform(&mut r, &[4, 3], -1.0, 1.0);
    let targets: Vec<usize> = (0..2).map(|_| r.gen_range(0..3)).collect();
    max_rel_error(
        &[x, w, b, wc],
        move |g, v| {
            let h = g.conv1d(v[0], v[1], v[2], 2, 1)?;
            let h = g.layer_norm(h, 2)?;
            let h = g.sigmoid(h)?;
            let p = g.global_mean_pool(h)?;
            let o = g.matmul(p, v[3])?;
            g.cross_entropy_with_logits(o, &targets)
        },
        seed,
    )
}

fn gated_recurrent(seed: u64) -> f64 {
    let mut r = rng(seed);
    // Cosine similarity is near-singular for tiny vectors, where no finite
    // step is meaningful; redraw until every prediction is well away from 0.
    let (frames, wz, uz, wh, wp) = loop {
        let draw = (
            uniform(&mut r, &[3, 4, 2], -1.0, 1.0),
            uniform(&mut r, &[2, 2], -1.0, 1.0),
            uniform(&mut r, &[2, 2], -1.0, 1.0),
            uniform(&mut r, &[2, 2], -1.0, 1.0),
            uniform(&mut r, &[2, 2], -1.0, 1.0),
        );
        let mut g = Graph::new();
        let v: Vec<Var> = [&draw.0, &draw.1, &draw.2, &draw.3, &draw.4]
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let pred = recurrent_prediction(&mut g, &v).expect("forward");
        let min_norm = g
            .value(pred)
            .data()
            .chunks(2)
            .map(|row| row.iter().map(|x| x * x).sum::<f32>().sqrt())
            .fold(f32::INFINITY, f32::min);
        if min_norm >= 0.2 {
            break draw;
        }
    };
    max_rel_error(
        &[frames, wz, uz, wh, wp],
        |g, v| {
            let pred = recurrent_prediction(g, v)?;
            let target = frame(g, v[0], 3)?;
            let sim = g.cosine_similarity(pred, target)?;
            let logits = g.scale(sim, 2.0)?;
            g.cross_entropy_with_logits(logits, &[0, 1, 2])
        },
        seed,
    )
}

fn frame(g: &mut Graph, frames: Var, t: usize) -> adapt2::tensor::Result<Var> {
    let f = g.slice(frames, 1, t, 1)?;
    g.reshape(f, &[3, 2])
}

/// Gated recurrence over the first three frames, projected by `v[4]`.
fn recurrent_prediction(g: &mut Graph, v: &[Var]) -> adapt2::tensor::Result<Var> {
    let mut h = frame(g, v[0], 0)?;
    h = g.tanh(h)?;
    for t in 1..3 {
        let x = frame(g, v[0], t)?;
        let zx = g.matmul(x, v[1])?;
        let zh = g.matmul(h, v[2])?;
        let z = g.add(zx, zh)?;
        let z = g.sigmoid(z)?;
        let cand = g.matmul(x, v[3])?;
        let cand = g.tanh(cand)?;
        let diff = g.sub(cand, h)?;
        let upd = g.mul(z, diff)?;
        h = g.add(h, upd)?;
    }
    g.matmul(h, v[4])
}
