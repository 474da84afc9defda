//! Named random streams derived from one run seed.
//!
//! Each consumer draws from its own ChaCha stream so toggling one source of
//! randomness (say, rotation augmentation) never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Rotation = 3,
    Noise = 4,
    Shuffle = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
