//! Counter-based noise generator.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so a sample can
//! be regenerated independently of evaluation order or thread count:
//!
//! 1. `k = splitmix64(seed ^ splitmix64(stream ^ 0x9E3779B97F4A7C15) ^ (counter · 0xD1B54A32D192ED03))`
//! 2. a uniform in `(0, 1)` is `((k >> 11) + 0.5) / 2⁵³`
//! 3. a standard normal is Box–Muller on the uniforms at sub-counters
//!    `2·counter` and `2·counter + 1`, taking the cosine branch.
//!
//! `splitmix64(x)` is the finalizer `z = x + 0x9E3779B97F4A7C15;
//! z = (z ^ z>>30)·0xBF58476D1CE4E5B9; z = (z ^ z>>27)·0x94D049BB133111EB;
//! z ^ z>>31` in wrapping 64-bit arithmetic.

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    pub seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn bits(&self, stream: u64, counter: u64) -> u64 {
        splitmix64(
            self.seed
                ^ splitmix64(stream ^ 0x9E37_79B9_7F4A_7C15)
                ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03),
        )
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform(&self, stream: u64, counter: u64) -> f64 {
        ((self.bits(stream, counter) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn gaussian(&self, stream: u64, counter: u64) -> f64 {
        let u1 = self.uniform(stream, counter.wrapping_mul(2));
        let u2 = self.uniform(stream, counter.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
