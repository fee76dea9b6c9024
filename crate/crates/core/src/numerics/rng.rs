//! Seeded random streams.
//!
//! Every stream is a xoshiro256++ generator. The 256-bit state is expanded
//! from a 64-bit seed with SplitMix64 (`SeedableRng::seed_from_u64`), and a
//! named sub-stream mixes an FNV-1a hash of its name into the parent seed.
//! Identical seeds give identical draw sequences within one build.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `name`; does not advance `self`.
    pub fn fork(&self, name: &str) -> Rng {
        Rng::new(self.seed ^ fnv1a(name.as_bytes()).rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal with standard deviation `std`, redrawn until within `±clip·std`.
    pub fn trunc_normal(&mut self, std: f64, clip: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= clip {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let (mut a, mut b) = (Rng::new(7), Rng::new(7));
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn forks_differ_by_name() {
        let root = Rng::new(1);
        assert_ne!(root.fork("a").next_u64(), root.fork("b").next_u64());
        assert_eq!(root.fork("a").next_u64(), root.fork("a").next_u64());
    }

    #[test]
    fn truncated_normal_respects_clip() {
        let mut r = Rng::new(3);
        for _ in 0..10_000 {
            assert!(r.trunc_normal(0.02, 2.0).abs() <= 0.04);
        }
    }
}
