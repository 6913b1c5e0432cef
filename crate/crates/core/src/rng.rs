//! Deterministic random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness. Each gets its own ChaCha stream so
/// that drawing more numbers in one subsystem never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Permutation = 4,
    Tuner = 5,
    Synthetic = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    sub_stream(seed, which, 0)
}

/// Stream for the `index`-th instance of a subsystem (a trial, a fold, ...).
pub fn sub_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

/// Seed for a nested run (e.g. one tuning trial) derived from a parent seed.
pub fn derive_seed(seed: u64, which: Stream, index: u64) -> u64 {
    use rand::RngCore;
    sub_stream(seed, which, index).next_u64()
}
