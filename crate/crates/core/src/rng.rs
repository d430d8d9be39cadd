//! Seeded randomness. Every stochastic component draws from a ChaCha8
//! stream derived from the experiment seed, so runs replay bit for bit.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Gumbel, StandardNormal};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Standard Gumbel(0, 1) draw.
pub fn gumbel(rng: &mut Rng) -> f64 {
    Gumbel::new(0.0, 1.0).expect("unit gumbel").sample(rng)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn unit(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
