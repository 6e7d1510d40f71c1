//! Seeded random streams.
//!
//! Every random decision in a run derives from one root seed. Components draw
//! from named sub-streams so that, for example, changing the occlusion stream
//! leaves database generation untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Database,
    Targets,
    Occlusion,
    Init,
    Sphere,
    Shuffle,
    Pairing,
    Fit,
    Test,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Database => 1,
            Stream::Targets => 2,
            Stream::Occlusion => 3,
            Stream::Init => 4,
            Stream::Sphere => 5,
            Stream::Shuffle => 6,
            Stream::Pairing => 7,
            Stream::Fit => 8,
            Stream::Test => 9,
        }
    }
}

/// Generator for `stream` of the root `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Derive a child seed from a parent seed and an index path, e.g. `(epoch, sample)`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    // splitmix64 finalizer over the path
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Generator seeded directly from a (derived) seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
