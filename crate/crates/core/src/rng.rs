//! Named random substreams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by
//! `(seed, purpose, a, b)`, so adding a consumer never shifts another's
//! draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    GroundTruth = 1,
    ClientSkew = 2,
    ClientData = 3,
    ClientSelection = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = splitmix64(seed);
    for word in [purpose as u64, a, b] {
        key = splitmix64(key ^ word);
    }
    ChaCha8Rng::seed_from_u64(key)
}
