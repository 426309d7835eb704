//! Named random substreams derived from one seed.
//!
//! Each purpose draws from its own ChaCha stream, so consuming more numbers
//! for one purpose (say, masking) never shifts another (say, init).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Estimator = 2,
    Mask = 3,
    Nsp = 4,
    Dropout = 5,
    Data = 6,
    Classifier = 7,
    Shuffle = 8,
    Verify = 9,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A stream further split by an index (e.g. one per step).
pub fn indexed(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
