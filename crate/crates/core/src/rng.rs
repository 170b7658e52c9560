//! Counter-based deterministic RNG with keyed substreams.
//!
//! Every random decision in the crate draws from a stream keyed by
//! (seed, tensor, block, step), so results are bit-identical regardless of
//! evaluation order or parallelism. Draw i of a stream is a pure function of
//! the key and i (SplitMix64-style: finalizer applied to key + i * GAMMA).

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stafford mix 13 finalizer; bijective on u64.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One keyed stream; cheap to construct, 16 bytes of state.
#[derive(Clone, Debug)]
pub struct DetRng {
    key: u64,
    ctr: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { key: mix64(seed ^ GAMMA), ctr: 0 }
    }

    /// Stream for a (tensor, block, step) coordinate under a seed.
    pub fn for_stream(seed: u64, tensor: u64, block: u64, step: u64) -> Self {
        let mut key = mix64(seed ^ GAMMA);
        key = mix64(key ^ tensor);
        key = mix64(key ^ block);
        key = mix64(key ^ step);
        DetRng { key, ctr: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GAMMA)).wrapping_add(GAMMA));
        self.ctr += 1;
        out
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; two uniforms per draw.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n); n must be nonzero.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// Quantization stream context for one tensor at one step; hands out one
/// independent substream per block.
#[derive(Clone, Copy, Debug)]
pub struct QuantStream {
    pub seed: u64,
    pub tensor: u64,
    pub step: u64,
}

impl QuantStream {
    pub fn new(seed: u64, tensor: u64, step: u64) -> Self {
        QuantStream { seed, tensor, step }
    }

    pub fn block(&self, block: u64) -> DetRng {
        DetRng::for_stream(self.seed, self.tensor, block, self.step)
    }
}
