//! Seedable, splittable random source.
//!
//! Every estimator in the crate is a pure function of a [`RandomStream`].
//! Parallel work never shares a stream; it splits one into children instead.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// A single-owner pseudo-random stream backed by ChaCha12.
///
/// Children produced by [`RandomStream::split`] are keyed from the parent and
/// placed on distinct ChaCha stream ids, so their outputs never overlap.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha12Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive `k` independent child streams. The parent advances, so two
    /// successive splits yield different children.
    pub fn split(&mut self, k: usize) -> Vec<RandomStream> {
        let key = self.rng.next_u64();
        (0..k)
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(key);
                rng.set_stream(i as u64 + 1);
                RandomStream { seed: key, rng }
            })
            .collect()
    }

    /// Single child stream; shorthand for `split(1)`.
    pub fn fork(&mut self) -> RandomStream {
        self.split(1).pop().expect("one child")
    }

    /// Uniform draw on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RandomStream::new(42);
        let mut b = RandomStream::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = RandomStream::new(1);
        let mut b = RandomStream::new(2);
        let same = (0..100).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn split_children_share_no_outputs() {
        let mut parent = RandomStream::new(7);
        let mut kids = parent.split(3);
        let n = 1_000_000;
        let mut seen: Vec<HashSet<u64>> = Vec::new();
        for k in kids.iter_mut() {
            seen.push((0..n).map(|_| k.next_u64()).collect());
        }
        for i in 0..seen.len() {
            for j in (i + 1)..seen.len() {
                assert_eq!(seen[i].intersection(&seen[j]).count(), 0);
            }
        }
    }

    #[test]
    fn split_children_are_uncorrelated() {
        let mut parent = RandomStream::new(11);
        let mut kids = parent.split(2);
        let n = 200_000;
        let (mut sxy, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = kids[0].uniform();
            let y = kids[1].uniform();
            sx += x;
            sy += y;
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        let nf = n as f64;
        let cov = sxy / nf - sx / nf * sy / nf;
        let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
        assert!(corr.abs() < 5.0 / nf.sqrt(), "corr {corr}");
    }

    #[test]
    fn successive_splits_differ() {
        let mut parent = RandomStream::new(3);
        let mut a = parent.fork();
        let mut b = parent.fork();
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut s = RandomStream::new(5);
        for _ in 0..10_000 {
            let u = s.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
