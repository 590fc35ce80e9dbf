//! Seeded random streams. Every consumer draws from its own ChaCha stream so
//! adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MOTION: u64 = 1;
pub const RIPPLE_TX: u64 = 2;
pub const RIPPLE_RX: u64 = 3;
pub const BLOCKERS: u64 = 4;
pub const NOISE: u64 = 5;
pub const SCENARIO: u64 = 6;
pub const SYNC_OFFSET: u64 = 7;

/// Words reserved per indexed draw; far more than any single draw consumes.
const WORDS_PER_INDEX: u128 = 1 << 16;

/// Generator for the `index`-th independent draw on `stream`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * WORDS_PER_INDEX);
    rng
}
