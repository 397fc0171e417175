//! Seeded random streams.
//!
//! Every stochastic step (initialization, augmentation, batching, cache
//! eviction) draws from ChaCha8 seeded through `seed_from_u64`, whose output
//! is fixed by the `rand_chacha` crate independent of platform. Sub-streams
//! for independent consumers are derived with SplitMix64 so that results do
//! not depend on the order in which workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the sub-stream addressed by `path` under `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn derived(seed: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn chacha8_test_vector() {
        // Frozen from the first run; guards against an accidental generator change.
        let mut r = seeded(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(first, FROZEN_SEED0);
    }

    const FROZEN_SEED0: [u64; 3] = [
        13_080_132_717_333_068_652,
        8_594_738_769_458_413_623,
        12_896_916_468_484_187_878,
    ];

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u32> = {
            let mut r = seeded(42);
            (0..16).map(|_| r.next_u32()).collect()
        };
        let b: Vec<u32> = {
            let mut r = seeded(42);
            (0..16).map(|_| r.next_u32()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }
}
