//! Counter-based seed derivation.
//!
//! Every random decision in a run draws from a generator seeded by
//! `derive(master, tag)` or `derive_indexed(master, tag, index)`. A sub-seed
//! depends only on the master seed and its own role tag, so adding a sweep
//! cell or a task never perturbs the randomness of any other consumer.
//!
//! The derivation is FNV-1a over the UTF-8 tag, xor-folded into the master
//! seed, then finalized with the SplitMix64 mixer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, tag: &str) -> u64 {
    mix(master ^ fnv1a(tag.as_bytes()))
}

pub fn derive_indexed(master: u64, tag: &str, index: u64) -> u64 {
    mix(derive(master, tag) ^ mix(index))
}

/// Seeds for `n` paired replicates of an experiment. Every sweep cell and
/// every buffer size uses the same list.
pub fn replicate_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_indexed(master, "replicate", i)).collect()
}

/// The generator used everywhere in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
