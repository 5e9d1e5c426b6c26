//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from an
//! experiment seed and a stream label, so that e.g. weight initialisation and
//! data ordering can be varied independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    DataOrder,
    Augment,
    Phantom,
    GradCheck,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x1a2b_3c4d,
            Stream::DataOrder => 0x5e6f_7081,
            Stream::Augment => 0x92a3_b4c5,
            Stream::Phantom => 0xd6e7_f809,
            Stream::GradCheck => 0x0f1e_2d3c,
        }
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(which.tag())))
}

/// Stream for the `index`-th item of a family (e.g. one phantom case).
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(which.tag())) ^ mix(index.wrapping_add(1))))
}
