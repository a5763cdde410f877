//! Seed plumbing. Every stochastic component draws from its own labeled
//! substream of the root seed, so adding draws in one component never
//! shifts the values another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named substreams of the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Sampling,
    Init,
    Negatives,
    Targets,
    Synthetic,
    MonteCarlo,
}

impl Stream {
    fn label(self) -> &'static str {
        match self {
            Stream::Sampling => "sampling",
            Stream::Init => "init",
            Stream::Negatives => "negatives",
            Stream::Targets => "targets",
            Stream::Synthetic => "synthetic",
            Stream::MonteCarlo => "monte-carlo",
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for `stream`, further keyed by `index` (e.g. the round number).
pub fn substream(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(root ^ fnv1a(stream.label())) ^ splitmix64(index));
    ChaCha8Rng::seed_from_u64(key)
}
