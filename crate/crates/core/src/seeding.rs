//! Deterministic seed derivation for independent random streams.
//!
//! Every stochastic component (scenario noise, weight init, policy draws,
//! sensor noise) owns a stream keyed by a base seed plus stable tags, so
//! results do not depend on thread scheduling or evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags for the stochastic components of the pipeline.
pub mod tags {
    pub const SCENARIO_NOISE: u64 = 0x5343454e; // "SCEN"
    pub const NODE_CLASS: u64 = 0x434c4153; // "CLAS"
    pub const MODEL_INIT: u64 = 0x494e4954; // "INIT"
    pub const TRAIN_SHUFFLE: u64 = 0x53485546; // "SHUF"
    pub const DROPOUT: u64 = 0x44524f50; // "DROP"
    pub const POLICY: u64 = 0x504f4c49; // "POLI"
    pub const SENSOR_NOISE: u64 = 0x4e4f4953; // "NOIS"
    pub const CALIBRATION: u64 = 0x43414c42; // "CALB"
    pub const INJECT: u64 = 0x494e4a43; // "INJC"
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a base seed with any number of tag/index parts into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// Seeded generator for the stream identified by `(base, parts)`.
pub fn stream_rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable() {
        // Frozen values: changing them silently would break reproducibility
        // of every archived artifact.
        assert_eq!(derive_seed(0, &[]), splitmix64(0));
        assert_eq!(derive_seed(42, &[1, 2]), derive_seed(42, &[1, 2]));
        assert_ne!(derive_seed(42, &[1, 2]), derive_seed(42, &[2, 1]));
        assert_ne!(derive_seed(42, &[1]), derive_seed(43, &[1]));
    }

    #[test]
    fn streams_with_distinct_tags_differ() {
        use rand::Rng;
        let mut a = stream_rng(7, &[tags::POLICY]);
        let mut b = stream_rng(7, &[tags::SENSOR_NOISE]);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
