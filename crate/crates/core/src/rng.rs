//! Counter-based random streams.
//!
//! Every replicate draws from its own ChaCha8 stream. The 256-bit key is
//! expanded from `(root seed, module tag)` with SplitMix64 and the ChaCha
//! stream id is the replicate index, so the stream a replicate sees depends
//! only on those three numbers and never on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Module tags keep streams of different estimators disjoint under one root seed.
pub mod tags {
    pub const TREE: u64 = 0x7472_6565;
    pub const FIELD: u64 = 0x0066_6965_6c64;
    pub const OCCUPATION: u64 = 0x6f63_6375_7079;
    pub const MAXDISP: u64 = 0x6d61_7864;
    pub const MN: u64 = 0x006d_5f6e;
    pub const SPINE: u64 = 0x0073_7069_6e65;
    pub const LAWS: u64 = 0x6c61_7773;
    pub const STATS: u64 = 0x7374_6174;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    key: [u8; 32],
}

impl StreamKey {
    pub fn new(root_seed: u64, tag: u64) -> Self {
        let mut state = root_seed ^ tag.rotate_left(17);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { key }
    }

    /// Derive a sub-key, e.g. one per grid point of a sweep.
    pub fn child(&self, salt: u64) -> Self {
        let mut state = u64::from_le_bytes(self.key[..8].try_into().unwrap()) ^ salt;
        let mut key = self.key;
        for chunk in key.chunks_exact_mut(8) {
            let mixed = splitmix64(&mut state) ^ u64::from_le_bytes((&*chunk).try_into().unwrap());
            chunk.copy_from_slice(&mixed.to_le_bytes());
        }
        Self { key }
    }

    pub fn stream(&self, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }
}
