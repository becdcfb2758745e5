//! Seeded, splittable random streams.
//!
//! A [`RngStream`] wraps ChaCha8 keyed by a 64-bit seed. Child streams are
//! derived with [`RngStream::split`], which is a pure function of
//! `(seed, key)`, so handing one child to each mask site or each image keeps
//! every draw independent of evaluation order and thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive child seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws taken from this stream so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream. Does not advance `self`.
    pub fn split(&self, key: u64) -> RngStream {
        RngStream::new(mix64(
            self.seed ^ mix64(key.wrapping_add(0x5851_f42d_4c95_7f2d)),
        ))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[lo, hi]`; returns `lo` exactly when `lo == hi`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.counter += 1;
        self.rng.random_range(0..n)
    }

    /// Returns 1 with probability `p`. Advances the counter by exactly one.
    pub fn bernoulli(&mut self, p: f64) -> Result<u8> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        Ok(u8::from(self.uniform() < p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn bernoulli_extremes_and_counter() {
        let mut s = RngStream::new(1);
        for i in 0..1000 {
            assert_eq!(s.bernoulli(0.0).unwrap(), 0);
            assert_eq!(s.bernoulli(1.0).unwrap(), 1);
            assert_eq!(s.counter(), 2 * (i + 1));
        }
    }

    #[test]
    fn bernoulli_rejects_bad_probability() {
        let mut s = RngStream::new(1);
        assert!(matches!(
            s.bernoulli(1.5),
            Err(Error::InvalidProbability(_))
        ));
        assert!(matches!(
            s.bernoulli(-0.1),
            Err(Error::InvalidProbability(_))
        ));
        assert_eq!(s.counter(), 0);
    }

    #[test]
    fn bernoulli_sample_mean() {
        let mut s = RngStream::new(2024);
        let n = 100_000;
        let hits: u64 = (0..n).map(|_| s.bernoulli(0.7).unwrap() as u64).sum();
        let mean = hits as f64 / n as f64;
        assert!((mean - 0.7).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn split_is_pure_and_distinct() {
        let root = RngStream::new(99);
        let mut a = root.split(3);
        let mut b = root.split(3);
        let mut c = root.split(4);
        assert_eq!(root.counter(), 0);
        let (x, y, z) = (a.uniform(), b.uniform(), c.uniform());
        assert_eq!(x.to_bits(), y.to_bits());
        assert_ne!(x.to_bits(), z.to_bits());
    }

    #[test]
    fn uniform_in_degenerate_interval() {
        let mut s = RngStream::new(0);
        assert_eq!(s.uniform_in(0.43, 0.43), 0.43);
    }
}
