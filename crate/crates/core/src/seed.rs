//! Seed derivation.
//!
//! Every random stream in a run descends from the experiment seed through
//! [`child_seed`]: `child = hash64(parent, purpose_label, index)`. The hash
//! is FNV-1a over the label bytes folded with the parent and index, then
//! finalised with the SplitMix64 mixer. Streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed for `purpose` and `index`.
pub fn child_seed(parent: u64, purpose: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let a = splitmix64(parent ^ h);
    splitmix64(a ^ splitmix64(index.wrapping_add(h.rotate_left(17))))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    rng_from(child_seed(parent, purpose, index))
}
