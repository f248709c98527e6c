//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by `(root seed, tag, index...)`
//! and never by the order in which work is scheduled, so results do not
//! depend on thread count or task interleaving.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod tag {
    pub const CHAIN: u64 = 0x01;
    pub const REPLICATE: u64 = 0x02;
    pub const SUBMODEL: u64 = 0x03;
    pub const CALIBRATION: u64 = 0x04;
    pub const POWER: u64 = 0x05;
    pub const SWEEP: u64 = 0x06;
    pub const DEMO: u64 = 0x07;
    pub const PPC: u64 = 0x08;
    pub const DATASET: u64 = 0x09;
    pub const FIT: u64 = 0x0a;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a key path.
pub fn derive_seed(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(root), |h, &k| {
        splitmix64(h ^ splitmix64(k.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
    })
}

/// RNG for the stream identified by `keys` under `root`.
pub fn stream(root: u64, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, keys))
}
