//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream whose seed is
//! derived from the master seed and a path of integers (a purpose tag followed
//! by indices such as task id or trial id). The derivation folds each path
//! element through SplitMix64, so a stream depends only on its own path and
//! never on how many other streams were consumed before it. This is what lets
//! trials and task generation run in any order, on any number of threads, and
//! still produce bit-identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags used as the first element of a stream path.
pub mod purpose {
    pub const TASK: u64 = 0x7461_736b;
    pub const EPISODE: u64 = 0x6570_6973;
    pub const ENCODER: u64 = 0x656e_636f;
    pub const TRIAL: u64 = 0x7472_6961;
    pub const OUTER: u64 = 0x6f75_7465;
    pub const INNER: u64 = 0x696e_6e65;
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p.wrapping_mul(GOLDEN_GAMMA)))
    })
}

pub fn stream(master: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, path))
}
