//! Seeded randomness. Every stochastic choice in the crate is drawn from a
//! ChaCha stream derived from an explicit seed, so runs replay exactly.

use alloc::vec::Vec;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream)`; used to give each sample, layer
/// or worker its own generator without sharing state.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.gen_range(lo..hi)
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}
