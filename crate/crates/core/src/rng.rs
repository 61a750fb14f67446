//! Counter-based random streams.
//!
//! Every consumer derives its own generator from the run seed plus a tuple of
//! tags (purpose, step, episode index, ...), so results never depend on the
//! order in which streams are drawn or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const TAG_INIT: u64 = 0x1;
pub const TAG_TRAIN_STEP: u64 = 0x2;
pub const TAG_EPISODE: u64 = 0x3;
pub const TAG_PRETRAIN: u64 = 0x4;
pub const TAG_EVAL: u64 = 0x5;
pub const TAG_SEARCH: u64 = 0x6;
pub const TAG_CATALOG: u64 = 0x7;
pub const TAG_MASK_FIT: u64 = 0x8;
pub const TAG_ANALYSIS: u64 = 0x9;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hashes a seed and tag tuple into a 64-bit key.
pub fn key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Independent generator for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(key(seed, tags))
}
