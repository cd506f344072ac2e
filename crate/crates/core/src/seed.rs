//! Seed expansion.
//!
//! Every random stream in the crate is derived from a single root seed by
//! folding a path of counters through the SplitMix64 finalizer:
//!
//! ```text
//! seed(root, [a, b, c]) = mix(mix(mix(root ^ K0, a), b), c)
//! mix(s, x)            = splitmix64(s ^ splitmix64(x + K1))
//! ```
//!
//! The first path element is always a stage tag from [`stage`], so streams
//! belonging to different stages never collide even when the remaining
//! counters (epoch, repeat, sample index) coincide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const K0: u64 = 0x6a09_e667_f3bc_c908;
const K1: u64 = 0xbb67_ae85_84ca_a73b;

/// Stage tags used as the first element of a seed path.
pub mod stage {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const REFERENCE: u64 = 7;
    pub const HOLDOUT: u64 = 8;
    pub const REPEAT: u64 = 9;
    pub const SHUFFLE: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root ^ K0), |s, &x| {
        splitmix64(s ^ splitmix64(x.wrapping_add(K1)))
    })
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
