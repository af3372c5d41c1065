//! Purpose-separated random streams.
//!
//! Every consumer of randomness asks for its own stream, keyed by the run
//! seed, a purpose tag and up to two indices (round, worker, class, ...).
//! Turning an attack on therefore never shifts the draws an honest worker
//! sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    ModelInit,
    Partition,
    Selection,
    LocalShuffle,
    Attack,
    AttackerChoice,
    SynthTrain,
    SynthTest,
    Subsample,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::ModelInit => 0x11,
            Purpose::Partition => 0x22,
            Purpose::Selection => 0x33,
            Purpose::LocalShuffle => 0x44,
            Purpose::Attack => 0x55,
            Purpose::AttackerChoice => 0x66,
            Purpose::SynthTrain => 0x77,
            Purpose::SynthTest => 0x88,
            Purpose::Subsample => 0x99,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose.tag());
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, a, b))
}
