//! Seed derivation. Every random stream in a run is keyed off one base seed
//! plus a path of integers, so streams never share state.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Named stream ids used with [`derive_seed`].
pub mod stream {
    pub const EPISODE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const ROLLOUT: u64 = 5;
    pub const SAMPLER: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = derive_seed(1, &[stream::EPISODE, 0]);
        assert_eq!(a, derive_seed(1, &[stream::EPISODE, 0]));
        assert_ne!(a, derive_seed(1, &[stream::EPISODE, 1]));
        assert_ne!(a, derive_seed(2, &[stream::EPISODE, 0]));
        assert_ne!(derive_seed(1, &[1, 2]), derive_seed(1, &[2, 1]));
    }
}
