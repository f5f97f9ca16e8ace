//! Portable, seedable random streams.
//!
//! Every random draw in the crate goes through [`SaffRng`], whose output is
//! fully specified so that other implementations can reproduce it:
//!
//! * generator: xoshiro256++, state seeded from a `u64` by running SplitMix64
//!   (`x += 0x9e3779b97f4a7c15; z = x; z = (z ^ z>>30)·0xbf58476d1ce4e5b9;
//!   z = (z ^ z>>27)·0x94d049bb133111eb; z ^ z>>31`) four times;
//! * uniform `f64` in `[0, 1)`: `(next_u64 >> 11) · 2⁻⁵³`;
//! * standard normal: Box–Muller cosine branch,
//!   `sqrt(−2 ln(1 − u₁)) · cos(2π u₂)`, consuming two uniforms per draw;
//! * integer below `n`: `(next_u64 · n) >> 64` on 128-bit products;
//! * stream `i` of a seed `s`: a fresh generator seeded with
//!   `s ^ (i · 0x9e3779b97f4a7c15)` (wrapping).

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const STREAM_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct SaffRng(Xoshiro256PlusPlus);

impl SaffRng {
    pub fn new(seed: u64) -> Self {
        SaffRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Independent stream `index` derived from `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        Self::new(seed ^ index.wrapping_mul(STREAM_MIX))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// `k` distinct values from `0..n` in draw order (partial Fisher–Yates).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
