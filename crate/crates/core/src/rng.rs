//! Seed derivation. Every random draw in a run comes from a ChaCha stream
//! whose seed is a pure function of the run seed and a path of tags, so any
//! iteration can be replayed without carrying generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_BATCH: u64 = 2;
pub(crate) const TAG_PAIRING: u64 = 3;
pub(crate) const TAG_NOISE: u64 = 4;
pub(crate) const TAG_MIXUP: u64 = 5;
pub(crate) const TAG_VAL: u64 = 6;
pub(crate) const TAG_TEST: u64 = 7;
pub(crate) const TAG_SPLIT: u64 = 8;
pub(crate) const TAG_SYNTH: u64 = 9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_change_the_seed() {
        assert_ne!(derive_seed(0, &[1]), derive_seed(0, &[2]));
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(5, &[3, 4]), derive_seed(5, &[3, 4]));
    }
}
