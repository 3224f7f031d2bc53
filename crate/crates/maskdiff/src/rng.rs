//! Deterministic named RNG substreams.
//!
//! Everything random in the crate flows from one `u64` seed through labelled
//! ChaCha streams, so distinct consumers (training draws, verification
//! trials, sampling workers) never share or race a generator and results are
//! reproducible across platforms and thread counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// RNG for the substream identified by `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha12Rng {
    indexed_stream(seed, label, 0)
}

/// RNG for the `index`-th substream under `label`; streams with distinct
/// `(label, index)` pairs are independent.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng
}

fn fnv1a(label: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in label.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
