//! Seed derivation. Every stochastic stream in the crate is a ChaCha8 generator
//! seeded from a value produced here, so results are identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive combination of a base seed with further words.
pub fn combine(base: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(mix64(base), |acc, &w| mix64(acc ^ mix64(w)))
}

/// FNV-1a, used to fold string tags (score-kind labels) into seeds.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_is_order_sensitive() {
        assert_ne!(combine(1, &[2, 3]), combine(1, &[3, 2]));
        assert_eq!(combine(1, &[2, 3]), combine(1, &[2, 3]));
        assert_ne!(combine(1, &[]), combine(2, &[]));
    }
}
