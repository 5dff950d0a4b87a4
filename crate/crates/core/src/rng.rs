//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng`
//! keyed by a 64-bit seed mixed from a parent seed, a stream tag and an index,
//! so independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives a child seed for the `index`-th draw of stream `tag`.
pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ tag_hash(tag)).wrapping_add(splitmix64(index)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parent: u64, tag: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(parent, tag, index))
}
