//! Small models and pools that keep training tests fast.

use adapt2::data::{Window, CHANNELS};
use adapt2::models::{ConvBlock, EncoderConfig};
use adapt2::pretext::{Pretext, PretextConfig, PretextKind};
use adapt2::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEPS: usize = 64;

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: CHANNELS,
        blocks: vec![ConvBlock { out_channels: 4, kernel: 5, stride: 4 }, ConvBlock { out_channels: 6, kernel: 3, stride: 2 }],
    }
}

pub fn tiny_pretext(kind: PretextKind) -> Pretext {
    let mut cfg = PretextConfig::new(kind);
    cfg.proj_dim = 8;
    cfg.frame_len = 16;
    Pretext::new(cfg, tiny_encoder()).unwrap()
}

/// Noisy sinusoids whose frequency depends on the class and whose offset
/// depends on the domain.
pub fn tiny_pool(domains: usize, per_domain: usize, classes: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in 0..domains {
        for i in 0..per_domain {
            let class = i % classes;
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let noise: Vec<f32> = (0..CHANNELS * STEPS).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let values = Tensor::from_fn(&[CHANNELS, STEPS], |j| {
                let (c, t) = (j / STEPS, j % STEPS);
                let f = 0.1 + 0.15 * class as f32;
                (f * t as f32 + phase + c as f32).sin() + 0.3 * d as f32 + noise[j]
            });
            out.push(Window::new(values, Some(class), d));
        }
    }
    out
}
