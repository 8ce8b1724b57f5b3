//! Named random substreams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream names used across the crate.
pub mod streams {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const ITERS: &str = "iters";
    pub const SAMPLING: &str = "sampling";
}

/// Deterministic generator for substream `name` of `seed`.
///
/// All streams share the seed and differ in the ChaCha stream id, so each
/// component's draws are reproducible independently of the others.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Serializable position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// Packs the state into 32-bit words.
    pub fn to_words(&self) -> Vec<u32> {
        let mut w: Vec<u32> = self
            .seed
            .chunks(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        w.push(self.stream as u32);
        w.push((self.stream >> 32) as u32);
        for i in 0..4 {
            w.push((self.word_pos >> (32 * i)) as u32);
        }
        w
    }

    pub fn from_words(w: &[u32]) -> Option<Self> {
        if w.len() != 14 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, word) in w[..8].iter().enumerate() {
            seed[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
        }
        let stream = u64::from(w[8]) | (u64::from(w[9]) << 32);
        let word_pos = (0..4).fold(0u128, |acc, i| acc | (u128::from(w[10 + i]) << (32 * i)));
        Some(Self {
            seed,
            stream,
            word_pos,
        })
    }
}
