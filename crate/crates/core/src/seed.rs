//! Seed derivation.
//!
//! Every random stream in a simulation is keyed by
//! `(root seed, purpose, client id, round)` and mixed through SplitMix64, so
//! streams never share state and results do not depend on execution order
//! or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Data,
    Partition,
    Init,
    Client,
    Shuffle,
    Selector,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Data => 0x6461_7461,
            Purpose::Partition => 0x7061_7274,
            Purpose::Init => 0x696e_6974,
            Purpose::Client => 0x636c_6e74,
            Purpose::Shuffle => 0x7368_7566,
            Purpose::Selector => 0x7365_6c63,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, purpose: Purpose, client: u64, round: u64) -> u64 {
    let mut h = splitmix64(root);
    for word in [purpose.tag(), client, round] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn rng(root: u64, purpose: Purpose, client: u64, round: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, client, round))
}
