//! Deterministic random-number streams.
//!
//! Every source of randomness in the crate is a ChaCha8 stream derived from
//! a `u64` seed plus a list of integer tags (step index, sample slot, purpose).
//! Two runs with the same seed produce identical streams regardless of how
//! work is split across workers, and a stream's exact position can be saved
//! and restored for checkpointing.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independently derived streams from colliding.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const SYNTH: u64 = 4;
}

/// A seedable, cloneable RNG with an exactly serializable state.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream from a seed and a tag path.
    ///
    /// Tags are mixed with splitmix64 so that nearby (seed, tag) tuples do
    /// not yield correlated streams.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut x = splitmix64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for &t in tags {
            x = splitmix64(x ^ splitmix64(t.wrapping_add(0x632b_e5ab)));
        }
        Rng::seed_from_u64(x)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller; deterministic given the stream.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        self.normal() * std
    }

    /// Exact stream state: (seed bytes, word position).
    pub fn state(&self) -> ([u8; 32], u128) {
        (self.inner.get_seed(), self.inner.get_word_pos())
    }

    pub fn from_state(seed: [u8; 32], word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_word_pos(word_pos);
        Rng { inner }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
