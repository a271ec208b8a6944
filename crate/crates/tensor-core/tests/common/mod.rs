// Shared across test binaries; not every binary uses every helper.
#![allow(dead_code)]

/// SplitMix64 stream for deterministic test inputs.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform in [lo, hi) but excluding a band of +-`gap` around zero.
    /// Keeps finite differences away from relu-style kinks.
    pub fn range_off_zero(&mut self, lo: f64, hi: f64, gap: f64) -> f64 {
        loop {
            let v = self.range(lo, hi);
            if v.abs() >= gap {
                return v;
            }
        }
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }

    pub fn vec_off_zero(&mut self, n: usize, lo: f64, hi: f64, gap: f64) -> Vec<f64> {
        (0..n).map(|_| self.range_off_zero(lo, hi, gap)).collect()
    }
}
