//! Seeded random streams.
//!
//! Every simulated row draws from its own ChaCha8 stream keyed by
//! `(seed, row index)`, so output is independent of how rows are scheduled
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
