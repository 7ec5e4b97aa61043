//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a [`CounterRng`] addressed by
//! `(seed, stream)`. The n-th output of a stream is a pure function of
//! `(seed, stream, n)`, so a mask for sample `k` at step `s` does not depend on
//! which other samples share its batch, and a resumed run replays the exact
//! same draws without persisting generator state.

use rand_core::{impls, RngCore};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream purposes. Combined with extra coordinates via [`stream_id`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    BatchOrder = 2,
    ImageMask = 3,
    TextMask = 4,
    Negatives = 5,
    Synth = 6,
    Test = 7,
}

/// Folds a purpose and any number of coordinates (step, sample index, ...)
/// into one 64-bit stream identifier.
pub fn stream_id(kind: Stream, coords: &[u64]) -> u64 {
    let mut h = mix64(kind as u64 ^ GOLDEN);
    for &c in coords {
        h = mix64(h ^ c.wrapping_add(GOLDEN).rotate_left(17));
    }
    h
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed ^ mix64(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn for_stream(seed: u64, kind: Stream, coords: &[u64]) -> Self {
        Self::new(seed, stream_id(kind, coords))
    }

    /// Uniform in the open interval (0, 1); never returns 0 so `ln` is safe.
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let n = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ mix64(n.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
