//! Counter-based seed derivation.
//!
//! Every random stream in an experiment is keyed by a base seed and a path of
//! labels, so any sub-experiment can be rerun in isolation and produce the
//! same numbers as inside a full sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A node in the seed tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(base: u64) -> Self {
        SeedKey(splitmix64(base))
    }

    /// Child stream for a named purpose.
    pub fn child(self, label: &str) -> Self {
        SeedKey(splitmix64(self.0 ^ hash_label(label)))
    }

    /// Child stream for an index, e.g. a replicate number.
    pub fn index(self, i: u64) -> Self {
        SeedKey(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0x5eed))))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
