//! Counter-based random streams.
//!
//! Every random draw in training is addressed by a key path (run seed, step,
//! image) plus a `(pixel, kind)` stream id, so results do not depend on the
//! order in which pixels or images are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a per-pixel stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum DrawKind {
    Intra = 0,
    Cross = 1,
    Mask = 2,
}

const KINDS: u64 = 4;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hierarchical stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self(mix64(seed))
    }

    pub fn child(self, id: u64) -> Self {
        Self(mix64(
            self.0 ^ mix64(id.wrapping_add(0x632B_E59B_D9B4_E019)),
        ))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Generator for the whole key (stream 0).
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent generator for one pixel and draw kind.
    pub fn pixel_rng(self, pixel: usize, kind: DrawKind) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(1 + pixel as u64 * KINDS + kind as u64);
        rng
    }
}
