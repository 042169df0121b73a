//! Named, counter-based random streams.
//!
//! Every source of randomness in the crate is a [`RngStream`]: a ChaCha8
//! generator keyed by `sha256(root seed || stream name)` with an explicit
//! 128-bit word counter. Distinct names yield independent streams from the
//! same root seed, and any stream can be rebuilt bit-exactly from
//! `(seed, name, counter)`. This is what makes whole training runs
//! replayable and lets one consumer (say, rollout sampling) draw more or
//! fewer values without disturbing any other stream.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A named random stream with an explicit counter.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    name: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Opens the stream `name` under `seed`, positioned at counter zero.
    pub fn new(seed: u64, name: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        RngStream {
            seed,
            name: name.to_string(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Reopens a stream at a saved counter position.
    pub fn restore(seed: u64, name: &str, counter: u128) -> Self {
        let mut s = RngStream::new(seed, name);
        s.rng.set_word_pos(counter);
        s
    }

    /// Derives the child stream `"{name}/{child}"` from the same root seed.
    ///
    /// The child starts at counter zero regardless of how much the parent
    /// has consumed, so sibling streams never interfere.
    pub fn fork(&self, child: &str) -> RngStream {
        RngStream::new(self.seed, &format!("{}/{}", self.name, child))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current word counter. Strictly increases as values are drawn.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// One uniform draw from `[0, 1)` consuming exactly one `u64`.
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// One Bernoulli draw; `p = 0` is always false and `p = 1` always true.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}
