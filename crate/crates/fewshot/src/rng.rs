//! Seed-derived random streams.
//!
//! Every stochastic routine takes an explicit RNG so parallel workers can use
//! independent streams derived from one experiment seed. Streams are keyed by
//! a purpose label plus indices, which keeps draws stable when unrelated code
//! adds or removes its own randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Portable RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derive an independent stream from `seed` for (`label`, `indices`).
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> Rng {
    let mut h = Fnv64::new();
    h.write(&seed.to_le_bytes());
    h.write(label.as_bytes());
    for &i in indices {
        h.write(&i.to_le_bytes());
    }
    let mut key = [0u8; 32];
    let mut state = h.finish();
    for chunk in key.chunks_mut(8) {
        // splitmix64 expansion of the hash into a full ChaCha key
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// FNV-1a 64-bit hash, also used for config fingerprints and dataset checksums.
#[derive(Debug, Clone)]
pub struct Fnv64 {
    state: u64,
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv64 {
    pub fn new() -> Self {
        Self {
            state: 0xcbf29ce484222325,
        }
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = Fnv64::new();
    h.write(bytes);
    h.finish()
}
