//! Counter-based, splittable randomness.
//!
//! Every stream is a ChaCha8 keystream keyed by `seed` and selected by
//! `stream_id`; the counter is the keystream word position. Children are
//! derived by hashing the parent's identity with a caller-chosen label, so a
//! stream tree is reproducible regardless of how many draws were taken from
//! any node or which thread consumed it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

#[derive(Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Derives an independent child stream. The result depends only on this
    /// stream's `(seed, stream_id)` and `label`, never on its counter.
    pub fn fork(&self, label: u64) -> RngStream {
        let parent = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(GOLDEN)));
        let child_seed = splitmix64(parent ^ splitmix64(label ^ 0xD6E8_FEB8_6659_FD93));
        RngStream::with_stream(child_seed, label)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    /// Draw from `Beta(alpha, alpha)`.
    pub fn beta_symmetric(&mut self, alpha: f64) -> f64 {
        match Beta::new(alpha, alpha) {
            Ok(d) => d.sample(&mut self.inner),
            Err(_) => 0.5,
        }
    }

    /// Uniform direction on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(s: &mut RngStream, n: usize) -> Vec<u64> {
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::with_stream(7, 3);
        let mut b = RngStream::with_stream(7, 3);
        assert_eq!(draws(&mut a, 32), draws(&mut b, 32));
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn fork_is_deterministic() {
        let s = RngStream::new(42);
        assert_eq!(draws(&mut s.fork(0), 64), draws(&mut s.fork(0), 64));
    }

    #[test]
    fn fork_ignores_parent_counter() {
        let mut s = RngStream::new(42);
        let before = draws(&mut s.fork(5), 8);
        s.next_u64();
        assert_eq!(before, draws(&mut s.fork(5), 8));
    }

    #[test]
    fn sibling_forks_differ() {
        let s = RngStream::new(42);
        let a = draws(&mut s.fork(0), 64);
        let b = draws(&mut s.fork(1), 64);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn fork_order_matters() {
        let s = RngStream::new(42);
        let ab = s.fork(0).fork(1).next_u64();
        let ba = s.fork(1).fork(0).next_u64();
        assert_ne!(ab, ba);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut s = RngStream::new(1);
        let mut p = s.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn beta_stays_in_unit_interval() {
        let mut s = RngStream::new(9);
        for _ in 0..1000 {
            let x = s.beta_symmetric(1.0);
            assert!((0.0..=1.0).contains(&x));
        }
    }
}
