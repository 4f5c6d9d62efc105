//! Reproducible random streams.
//!
//! Each stream is a ChaCha20 generator keyed by the run seed, with the
//! ChaCha stream id derived from a textual tag ("data", "init", "orbit/3",
//! …). Streams with different tags are independent; the same `(seed, tag)`
//! always yields the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha20Rng;

/// FNV-1a, used only to map tags to stream ids.
fn tag_id(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, tag: &str) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(tag_id(tag));
    rng
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| normal(rng)).collect()
}
