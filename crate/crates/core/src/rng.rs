//! Named random sub-streams.
//!
//! Every random draw in a run derives from one user seed. Each consumer gets
//! its own ChaCha stream keyed by `(stream kind, index)`, so skipping one
//! consumer (say, target-domain dropout) never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Sampling = 4,
    Split = 5,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
