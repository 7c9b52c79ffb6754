//! Counter-derived random streams.
//!
//! Every random decision in the pipeline draws from a stream keyed by
//! `(seed, purpose, indices...)`, so results do not depend on how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, keys: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ splitmix(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream purposes.
pub(crate) mod purpose {
    pub const INIT: u64 = 1;
    pub const EPOCH_PLAN: u64 = 2;
    pub const TRAIN_SAMPLE: u64 = 3;
    pub const MIXUP: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SYNTH: u64 = 7;
}
