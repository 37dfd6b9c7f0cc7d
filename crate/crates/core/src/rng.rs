//! Independent random streams, one per purpose, so that results do not
//! depend on how many draws another purpose made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    AngleMask,
    BetaSign,
    Shuffle,
    Sampling,
}

impl Stream {
    /// ChaCha stream id; `sub` separates e.g. epochs or weight blocks.
    pub fn id(self, sub: u64) -> u64 {
        let purpose = match self {
            Stream::Init => 1,
            Stream::AngleMask => 2,
            Stream::BetaSign => 3,
            Stream::Shuffle => 4,
            Stream::Sampling => 5,
        };
        (sub << 8) | purpose
    }
}

pub fn stream_rng(seed: u64, stream: Stream, sub: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id(sub));
    rng
}
