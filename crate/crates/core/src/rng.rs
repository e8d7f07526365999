//! Seeded random streams.
//!
//! Every simulation takes a caller-owned stream. ChaCha8 keeps results
//! identical across platforms and crate versions, and its stream id lets one
//! master seed fan out into independent sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `stream` of master seed `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
