//! Seeded random streams.
//!
//! Every source of randomness in the crate is a named [`Stream`] derived
//! from one master seed. Streams are independent: reseeding or consuming
//! one never changes the values another produces. All sampling goes
//! through `next_u64` of ChaCha8 so the byte sequence is stable across
//! dependency upgrades, and stream state can be captured and restored
//! exactly for checkpointing.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Mixes a master seed with a stream name into an independent sub-seed.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    // FNV-1a over the name, then SplitMix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
    seed: u64,
}

/// Restorable snapshot of a stream (seed plus words consumed).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub word_pos: u128,
}

impl Stream {
    pub fn new(master: u64, name: &str) -> Self {
        let seed = derive_seed(master, name);
        Stream { rng: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    pub fn from_seed(seed: u64) -> Self {
        Stream { rng: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    pub fn state(&self) -> StreamState {
        StreamState { seed: self.seed, word_pos: self.rng.get_word_pos() }
    }

    pub fn restore(state: &StreamState) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_word_pos(state.word_pos);
        Stream { rng, seed: state.seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (one value per call, no caching).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n) by rejection, unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
