//! Seeded random streams.
//!
//! Every random draw in the stack comes from one master seed. Components ask
//! for a named stream (`"data"`, `"init"`, `"crops"`, `"ar"`, ...) so that
//! changing how one component consumes randomness never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the stream name; used as the ChaCha stream id.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `name` derived from `master`.
pub fn stream(master: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream_id(name));
    rng
}

/// Sub-stream `index` of a named stream, e.g. one per speaker.
pub fn substream(master: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream_id(name));
    rng
}

/// Exact position of a generator, enough to resume it bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
