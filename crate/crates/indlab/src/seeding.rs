//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a single root seed. Independent
//! streams (one per training step, one per sample within a batch) are derived
//! with a splitmix64 step so that streams can be generated in parallel without
//! sharing RNG state: `stream_seed(root, i)` is the i-th output of a splitmix64
//! generator initialized at `root`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The `index`-th value of the splitmix64 sequence seeded with `root`.
pub fn stream_seed(root: u64, index: u64) -> u64 {
    mix(root.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// RNG for a derived stream. ChaCha8 keeps the stream identical across
/// platforms and releases.
pub fn stream_rng(root: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, index))
}
