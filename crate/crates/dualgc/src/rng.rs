//! Deterministic, splittable random streams.
//!
//! Every consumer of randomness derives its own counter-based stream from
//! `(seed, stream id)`, so concurrent work units never share generator state
//! and results do not depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the well-known random consumers of a run.
pub mod stream {
    pub const VIEW1_NOISE: u64 = 1;
    pub const VIEW2_NOISE: u64 = 2;
    pub const WEIGHT_INIT: u64 = 3;
    pub const KMEANS_INIT: u64 = 4;
    pub const KMEANS_FINAL: u64 = 5;
    pub const SBM_EDGES: u64 = 6;
    pub const SBM_FEATURES: u64 = 7;
}

/// Derive the generator for one `(seed, stream)` pair.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
