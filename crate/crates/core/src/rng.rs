//! Seed derivation.
//!
//! All randomness in the crate flows from a single `u64` seed through
//! stateless derivation: every consumer (an utterance, a training step, a
//! mask draw) gets its own ChaCha stream keyed by a label and a few indices.
//! Nothing depends on RNG draw order elsewhere in the program, which is what
//! makes checkpoint resume and accumulation-splitting exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for combining seed material.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed, a purpose label, and indices.
pub fn derive(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = mix(seed);
    for b in label.as_bytes() {
        h = mix(h ^ u64::from(*b));
    }
    for ix in indices {
        h = mix(h ^ *ix);
    }
    h
}

/// A ChaCha stream for one (seed, label, indices) tuple.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, indices))
}

/// A stable numeric key for a string identifier, independent of any seed.
/// Used to tie per-utterance randomness to the utterance itself rather than
/// to its position in a batch.
pub fn key(label: &str) -> u64 {
    derive(0, label, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        let a = derive(42, "mask", &[3, 7]);
        let b = derive(42, "mask", &[3, 7]);
        let c = derive(42, "negatives", &[3, 7]);
        let d = derive(42, "mask", &[3, 8]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn streams_are_independent_of_draw_order() {
        let mut r1 = stream(1, "x", &[0]);
        let _: f64 = r1.random();
        let mut r2 = stream(1, "x", &[1]);
        let v2: f64 = r2.random();
        let mut r2b = stream(1, "x", &[1]);
        let v2b: f64 = r2b.random();
        assert_eq!(v2, v2b);
    }
}
