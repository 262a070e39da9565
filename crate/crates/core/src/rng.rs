//! Deterministic seed derivation.
//!
//! Every randomized component draws from a `ChaCha8Rng` seeded by hashing a
//! base seed with a purpose tag and index parts. Streams are therefore
//! independent of call order and identical across platforms and thread
//! counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag and parts, mixed with the base seed.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(PRIME);
    }
    for part in parts {
        for byte in part.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
    }
    // final avalanche (splitmix64 tail)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// RNG for a derived stream.
pub fn stream(base: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive_seed(7, "scene", &[3]), derive_seed(7, "scene", &[3]));
        assert_ne!(derive_seed(7, "scene", &[3]), derive_seed(7, "scene", &[4]));
        assert_ne!(derive_seed(7, "scene", &[3]), derive_seed(8, "scene", &[3]));
        assert_ne!(derive_seed(7, "scene", &[3]), derive_seed(7, "frame", &[3]));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<f64> = stream(1, "t", &[0, 1]).random_iter().take(8).collect();
        let b: Vec<f64> = stream(1, "t", &[0, 1]).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn nearby_parts_decorrelate() {
        let mut a = stream(1, "t", &[0]);
        let mut b = stream(1, "t", &[1]);
        let va: f64 = a.random();
        let vb: f64 = b.random();
        assert_ne!(va, vb);
    }
}
