//! Seed derivation. Every random quantity descends from one user seed through
//! named sub-streams so that any stage can be replayed on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// A node in the seed tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: [u8; 32],
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"repaintlab/root");
        h.update(seed.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    /// Child stream identified by a name, e.g. `"diffusion"`.
    pub fn named(&self, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"/name/");
        h.update(name.as_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    /// Child stream identified by an index, e.g. a patch number.
    pub fn indexed(&self, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(b"/index/");
        h.update(index.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    pub fn rng(&self) -> Rng {
        ChaCha8Rng::from_seed(self.key)
    }

    /// A 64-bit seed summarizing this stream.
    pub fn seed(&self) -> u64 {
        u64::from_le_bytes(self.key[..8].try_into().unwrap())
    }
}
