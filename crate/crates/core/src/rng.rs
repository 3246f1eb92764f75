//! Deterministic random substreams.
//!
//! Every Monte Carlo consumer draws from its own ChaCha stream, selected by a
//! [`Stream`] tag, so results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    FadingCheck,
    /// Initial particles for frame one.
    Particles,
    /// Resampling chunk `chunk` when building frame `frame`.
    Propagate { frame: u32, chunk: u32 },
    /// Conditional capture estimate for `(frame, interferers)`.
    Capture { frame: u32, interferers: u32 },
    /// Simulation replica.
    Replica(u32),
    /// Free-form stream for tests and ad-hoc experiments.
    Custom(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::FadingCheck => 1,
            Stream::Particles => 2,
            Stream::Propagate { frame, chunk } => {
                (3 << 56) | (u64::from(frame) << 32) | u64::from(chunk)
            }
            Stream::Capture { frame, interferers } => {
                (4 << 56) | (u64::from(frame) << 32) | u64::from(interferers)
            }
            Stream::Replica(r) => (5 << 56) | u64::from(r),
            Stream::Custom(x) => (6 << 56) ^ x,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
