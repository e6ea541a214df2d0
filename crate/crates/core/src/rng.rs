//! Named random streams derived from a single run seed.
//!
//! Every source of randomness in a run draws from its own stream so that,
//! for instance, changing the link-loss probability does not perturb the
//! mobility trace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Placement,
    Mobility,
    Demand,
    Link,
    Rwd,
    SelectiveReply,
    Solver,
    Reference,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Placement => 0x01,
            Stream::Mobility => 0x02,
            Stream::Demand => 0x03,
            Stream::Link => 0x04,
            Stream::Rwd => 0x05,
            Stream::SelectiveReply => 0x06,
            Stream::Solver => 0x07,
            Stream::Reference => 0x08,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.tag().wrapping_mul(0xa076_1d64_78bd_642f))
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}
