//! Deterministic seed derivation. Every stochastic component owns a stream
//! derived from the global seed plus a string tag and integer lanes, so runs
//! replay exactly regardless of execution order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mix a tag and lane values into a master seed (splitmix64-style avalanche).
pub fn derive_seed(master: u64, tag: &str, lanes: &[u64]) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = mix(h ^ b as u64);
    }
    for &l in lanes {
        h = mix(h ^ l);
    }
    mix(h)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(master: u64, tag: &str, lanes: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag, lanes))
}

pub fn stream_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
