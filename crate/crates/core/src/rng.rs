//! Seed derivation: every random stream in an experiment descends from
//! one root seed plus a stream name, so ablations on the same seed see
//! identical environments regardless of how much randomness each
//! consumer draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(root_seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the stream name, folded into the root seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(root_seed ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_deterministic() {
        let a: f64 = stream(7, "traces").gen();
        let b: f64 = stream(7, "policy").gen();
        let a2: f64 = stream(7, "traces").gen();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}
