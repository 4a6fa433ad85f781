//! Deterministic pseudo-random number generation.
//!
//! Every stochastic component (initializers, phantom generators, dropout)
//! draws from a [`SeedRng`] derived from a user-visible 64-bit seed. Streams
//! are split by tag so that, e.g., the weight initializer and the noise
//! generator stay independent and a run reproduces bit-exactly at a fixed
//! seed regardless of how many draws each consumer makes.

use rand::Rng as _;
use rand::SeedableRng as _;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

/// Seedable generator with tag-split substreams (xoshiro256** core).
pub struct SeedRng {
    inner: Xoshiro256StarStar,
}

/// FNV-1a over the tag bytes; stable across platforms, unlike the std hasher.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer, used to decorrelate seed/tag combinations.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// Independent substream identified by `(seed, tag)`.
    pub fn stream(seed: u64, tag: &str) -> Self {
        Self::new(splitmix64(seed ^ fnv1a(tag)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal with the given mean and standard deviation.
    pub fn normal_with(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }
}
