//! Counter-based splittable random streams.
//!
//! A [`Stream`] is a 64-bit key plus a counter. Output `i` is
//! `mix64(key + (i+1) * GOLDEN)`, i.e. SplitMix64 keyed by the stream.
//! Child streams are derived from the parent key, a label and an index:
//! `key' = mix64(key ^ fnv1a64(label) ^ mix64(index + GOLDEN))`, so the
//! stream of (module, instance, sample) is fixed regardless of the order in
//! which work is scheduled.

use rand::Rng;
use rand_core::RngCore;
use rand_distr::StandardNormal;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: mix64(seed ^ GOLDEN), counter: 0 }
    }

    /// Child stream for `(label, index)`; independent of this stream's counter.
    pub fn derive(&self, label: &str, index: u64) -> Stream {
        let key = mix64(self.key ^ fnv1a64(label.as_bytes()) ^ mix64(index.wrapping_add(GOLDEN)));
        Stream { key, counter: 0 }
    }

    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits in [0,1)
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.random_range(0..n)
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_pure() {
        let mut a = Stream::new(7);
        let c1 = a.derive("x", 3);
        a.next_u64();
        let c2 = a.derive("x", 3);
        assert_eq!(c1, c2);
        assert_ne!(a.derive("x", 4), c1);
        assert_ne!(a.derive("y", 3), c1);
    }

    #[test]
    fn uniform_moments() {
        let mut s = Stream::new(1);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.02);
    }
}
