//! Keyed deterministic random streams.
//!
//! Every stochastic operation takes a [`Stream`] derived from the global
//! seed and a path of string keys, e.g. `stream(seed).fork("stage1").fork("fold3")`.
//! Independent runs (folds, training arms) get disjoint streams, so results
//! do not depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The concrete RNG used throughout the crate.
pub type Stream = ChaCha8Rng;

// splitmix64; stable across platforms and crate versions.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_state(seed: u64, key: &str) -> [u8; 32] {
    let mut h = mix(seed ^ 0x5175_69c8_a9d1_5f3b);
    for &b in key.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(h ^ i as u64).to_le_bytes());
    }
    out
}

/// Root stream for a run.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::from_seed(derive_state(seed, ""))
}

/// Stream for a named sub-task of a run. Streams with distinct key paths
/// are statistically independent.
pub fn keyed_stream(seed: u64, key: &str) -> Stream {
    ChaCha8Rng::from_seed(derive_state(seed, key))
}

/// Derive a child stream from a parent seed and key without consuming the
/// parent. Used to hand disjoint streams to concurrent jobs.
pub fn fork(seed: u64, parent_key: &str, child_key: &str) -> Stream {
    let mut path = String::with_capacity(parent_key.len() + child_key.len() + 1);
    path.push_str(parent_key);
    path.push('/');
    path.push_str(child_key);
    keyed_stream(seed, &path)
}
