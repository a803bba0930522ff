//! Seeded random streams. Every stage draws from a named sub-stream of one
//! run seed, so stages can be replayed independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Named sub-streams used by the pipeline.
pub mod streams {
    pub const PRIOR_INIT: &str = "prior-init";
    pub const DETECTOR_INIT: &str = "detector-init";
    pub const DATA: &str = "data";
    pub const LATENT_NOISE: &str = "latent-noise";
}

/// Deterministic generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "data").random();
        let b: u64 = stream(7, "data").random();
        let c: u64 = stream(7, "prior-init").random();
        let d: u64 = stream(8, "data").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
