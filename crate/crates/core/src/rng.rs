//! Seeded, splittable randomness.
//!
//! Every random draw in a run descends from one root seed. Independent
//! consumers (benchmark generation, weight init, batch sampling, ...) get
//! their own ChaCha stream derived from the root seed and a stream label, so
//! adding draws to one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Child seed tree for a named sub-component.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree {
            root: mix(self.root, fnv1a(label.as_bytes())),
        }
    }

    /// Child seed tree for an indexed sub-component (epoch, run index, ...).
    pub fn index(&self, i: u64) -> SeedTree {
        SeedTree {
            root: mix(self.root, splitmix64(i ^ 0xA076_1D64_78BD_642F)),
        }
    }

    pub fn rng(&self, label: &str) -> Rng {
        Rng::seed_from_u64(self.child(label).root)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}
