//! Deterministic random streams.
//!
//! Every stochastic component in the crate draws from a [`Stream`]: a
//! ChaCha8 keystream (counter-based, so sequences are identical across
//! platforms and runs for a given seed). Sub-streams are derived with
//! [`Stream::split`], which pulls a fresh 256-bit key out of the parent;
//! child output is unrelated to the parent continuation, so per-layer or
//! per-batch streams never alias each other.
//!
//! Seeds enter exactly once, through config files. Nothing in the crate
//! consults global RNG state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform draws are clamped to `[EPS_UNIFORM, 1 - EPS_UNIFORM]` before any
/// logarithm so the double-log Gumbel transform stays finite.
pub const EPS_UNIFORM: f64 = 1.0 / 4_294_967_296.0; // 2^-32

#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn seeded(seed: u64) -> Self {
        Stream {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream, advancing this one.
    pub fn split(&mut self) -> Stream {
        let mut key = [0u8; 32];
        self.inner.fill_bytes(&mut key);
        Stream {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1): `(k + 0.5) / 2^53`.
    pub fn uniform_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_open01()
    }

    /// Standard Gumbel(0, 1) draw.
    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform_open01())
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open01();
        let u2 = self.uniform_open01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index uniform on `0..n` via widening multiply (no modulo bias worth
    /// caring about at 64 bits, and fully deterministic).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "index range must be non-empty");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// `g = -ln(-ln(u))` with `u` clamped away from {0, 1}.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(EPS_UNIFORM, 1.0 - EPS_UNIFORM);
    -(-u.ln()).ln()
}

/// `n` Gumbel draws from `rng`, in draw order.
pub fn sample_gumbel(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gumbel()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn same_seed_reproduces_sequence() {
        let mut a = Stream::seeded(7);
        let mut b = Stream::seeded(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Stream::seeded(1);
        let mut b = Stream::seeded(2);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0, "distinct seeds should give distinct words");
    }

    #[test]
    fn split_children_are_independent_of_parent_and_each_other() {
        let mut parent = Stream::seeded(42);
        let mut sibling = parent.clone();
        let mut child_a = parent.split();
        let mut child_b = parent.split();
        // The parent advanced past both key draws.
        assert_ne!(parent.next_u64(), sibling.next_u64());
        // Children disagree with each other from the first word.
        assert_ne!(child_a.next_u64(), child_b.next_u64());
    }

    #[test]
    fn uniform_stays_strictly_inside_unit_interval() {
        let mut rng = Stream::seeded(3);
        for _ in 0..100_000 {
            let u = rng.uniform_open01();
            assert!(u > 0.0 && u < 1.0, "u = {u} escaped (0, 1)");
        }
    }

    #[test]
    fn gumbel_transform_matches_closed_forms() {
        // Median of the standard Gumbel: -ln(ln 2).
        let median = -(2.0_f64.ln()).ln();
        assert!((gumbel_from_uniform(0.5) - median).abs() < 1e-12);
        // u = 1/e maps exactly to zero.
        assert!(gumbel_from_uniform((-1.0_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gumbel_transform_is_finite_at_clamped_endpoints() {
        for u in [0.0, 1.0, f64::MIN_POSITIVE, 1.0 - 1e-18] {
            let g = gumbel_from_uniform(u);
            assert!(g.is_finite(), "u = {u} gave non-finite {g}");
        }
        assert!((gumbel_from_uniform(0.0) - gumbel_from_uniform(EPS_UNIFORM)).abs() < 1e-15);
    }

    #[test]
    fn gumbel_sample_mean_approaches_euler_mascheroni() {
        let mut rng = Stream::seeded(42);
        let n = 1_000_000;
        let samples = sample_gumbel(&mut rng, n);
        let mean = samples.iter().sum::<f64>() / n as f64;
        assert!(
            (mean - EULER_MASCHERONI).abs() < 0.01,
            "sample mean {mean} too far from {EULER_MASCHERONI}"
        );
    }

    #[test]
    fn gumbel_sample_median_approaches_neg_ln_ln_two() {
        let mut rng = Stream::seeded(42);
        let mut samples = sample_gumbel(&mut rng, 1_000_000);
        let mid = samples.len() / 2;
        let (_, median, _) = samples.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        let expected = -(2.0_f64.ln()).ln();
        assert!(
            (*median - expected).abs() < 0.01,
            "sample median {median} too far from {expected}"
        );
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Stream::seeded(11);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut items: Vec<u32> = (0..1000).collect();
        let mut rng = Stream::seeded(5);
        rng.shuffle(&mut items);
        let mut again: Vec<u32> = (0..1000).collect();
        let mut rng2 = Stream::seeded(5);
        rng2.shuffle(&mut again);
        assert_eq!(items, again, "same seed must give the same order");
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>(), "multiset changed");
        assert_ne!(items, (0..1000).collect::<Vec<_>>(), "identity shuffle is wildly unlikely");
    }
}
