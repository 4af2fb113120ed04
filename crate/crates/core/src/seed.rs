//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ProbeVariability,
    MeasurementNoise,
    Script,
    Spikes,
    Shuffle,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ProbeVariability => 0x7072_6f62,
            Stream::MeasurementNoise => 0x6e6f_6973,
            Stream::Script => 0x7363_7270,
            Stream::Spikes => 0x7370_696b,
            Stream::Shuffle => 0x7368_7566,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream.tag())) ^ index)
}

pub fn stream_rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}
