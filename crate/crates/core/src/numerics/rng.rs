use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Name of the generator behind [`SeededRng`].
pub const RNG_ALGORITHM: &str = "chacha8";

/// ChaCha8 keyed by a 64-bit seed. ChaCha is counter based and supports
/// 2^64 independent streams per key, which is how per-utterance streams are
/// derived without depending on iteration order.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for one `(purpose, epoch, utterance)` triple under `seed`.
    pub fn for_stream(seed: u64, purpose: &str, epoch: u64, utterance_id: &str) -> Self {
        let mut h = fnv1a(FNV_OFFSET, purpose.as_bytes());
        h = fnv1a(h, &[0xff]);
        h = fnv1a(h, &epoch.to_le_bytes());
        h = fnv1a(h, utterance_id.as_bytes());
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(h);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Inverse-CDF draw from a categorical distribution given by
    /// unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut r = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                return i;
            }
            r -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
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

    #[test]
    fn same_seed_same_million_draws() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn reseeding_restarts_the_stream() {
        let mut r = SeededRng::new(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        let mut again = SeededRng::new(0);
        let second: Vec<u64> = (0..3).map(|_| again.next_u64()).collect();
        assert_eq!(first, second);
        assert_eq!(r.algorithm(), "chacha8");
    }

    #[test]
    fn streams_are_separated() {
        let mut a = SeededRng::for_stream(7, "perturb", 1, "utt-1");
        let mut b = SeededRng::for_stream(7, "perturb", 2, "utt-1");
        let mut c = SeededRng::for_stream(7, "perturb", 1, "utt-2");
        let mut a2 = SeededRng::for_stream(7, "perturb", 1, "utt-1");
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        let xa2: Vec<u64> = (0..4).map(|_| a2.next_u64()).collect();
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut r = SeededRng::new(3);
        for _ in 0..1000 {
            let k = r.categorical(&[0.0, 2.0, 0.0, 1.0]);
            assert!(k == 1 || k == 3);
        }
    }
}
