//! Seed derivation. Every stochastic step draws from its own ChaCha stream
//! keyed by a base seed and a path of integers, so results never depend on
//! scheduling or on how many draws some other step made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `path` into `base`; distinct paths give unrelated seeds.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base ^ 0x9e37_79b9_7f4a_7c15), |acc, &p| mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(p)))
}

pub fn stream(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// What a training step's randomness is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Support = 1,
    Query = 2,
    Validation = 3,
    Replay = 4,
    Evaluation = 5,
}

/// Stream for one gradient step. Plain pre-training draws its batch
/// randomness under [`Phase::Query`], the same key meta-training uses for the
/// outer step, so the two agree exactly when the inner loop is disabled.
pub fn step_stream(seed: u64, epoch: usize, index: usize, phase: Phase) -> Rng {
    stream(seed, &[0x57e9, epoch as u64, index as u64, phase as u64])
}
