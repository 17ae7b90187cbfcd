//! Seeded randomness helpers.
//!
//! Streams used for sequential sampling are ChaCha8 generators derived from a
//! root seed and a purpose label. Per-event draws inside the simulator are
//! instead *keyed*: a uniform number is a pure function of `(seed, tag, id, tick)`
//! so that two runs with different schemes see the same number for the same
//! potential event.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a sequence of words into one 64-bit value.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x51_7cc1_b727_220a_u64, |acc, &w| mix(acc ^ mix(w)))
}

/// Uniform draw in `[0, 1)` keyed by the given words.
#[inline]
pub fn keyed_uniform(words: &[u64]) -> f64 {
    (hash_words(words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent generator for a labelled purpose under a root seed.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let label_hash = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
    ChaCha8Rng::seed_from_u64(hash_words(&[seed, label_hash, index]))
}

/// Derive a child seed (e.g. one per scheme in a dataset build).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    hash_words(&[seed, 0xd1b5_4a32_d192_ed03, index])
}
