//! Seeded randomness.
//!
//! Every random draw in a run comes from a PCG64 (XSL-RR 128/64) generator
//! derived from one root seed and a stream name:
//!
//! ```text
//! key    = FNV-1a-64(name)
//! state  = (root << 64) | key
//! stream = key
//! rng    = Pcg64::new(state, stream)
//! ```
//!
//! Standard names are `data`, `init`, `batch`, `probes`, `dequant` and
//! `noise`. Indexed substreams use the name `"{name}/{index}"`.

use rand::Rng;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

pub const STREAM_DATA: &str = "data";
pub const STREAM_INIT: &str = "init";
pub const STREAM_BATCH: &str = "batch";
pub const STREAM_PROBES: &str = "probes";
pub const STREAM_DEQUANT: &str = "dequant";
pub const STREAM_NOISE: &str = "noise";

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Named substream of a root seed.
pub fn substream(root: u64, name: &str) -> Pcg64 {
    let key = fnv1a(name);
    let state = (u128::from(root) << 64) | u128::from(key);
    Pcg64::new(state, u128::from(key))
}

pub fn indexed_substream(root: u64, name: &str, index: u64) -> Pcg64 {
    substream(root, &format!("{name}/{index}"))
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
