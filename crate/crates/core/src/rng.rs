//! Deterministic splittable random number generator.
//!
//! A counter-based SplitMix64 core. Independent streams are derived from a
//! root seed and a stream label, so corpus generation, poisoning, parameter
//! init and training-order shuffles never share draws: reordering one phase
//! cannot perturb another.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    state: u64,
    /// Cached second Box-Muller draw, as raw f64.
    spare_gauss: Option<f64>,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed, spare_gauss: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream from this generator's seed and a label.
    /// Pure function of (seed, label): does not consume draws from `self`.
    pub fn stream(&self, label: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(label.wrapping_mul(GOLDEN).wrapping_add(1))))
    }

    /// Stream derivation from a string label, for readable call sites.
    pub fn stream_named(&self, label: &str) -> Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.stream(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, n). n must be nonzero. Rejection-free (modulo bias is
    /// negligible at the corpus sizes used here, but keep it exact anyway).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        // Lemire's multiply-shift reduction with rejection.
        loop {
            let x = self.next_u64();
            let m = (x as u128).wrapping_mul(n as u128);
            let lo = m as u64;
            if lo >= n || lo >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform f64 in [0, 1) with 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1) at the target precision. All draws happen in f64
    /// and are rounded once, so f32 and f64 streams stay aligned.
    pub fn uniform<S: Scalar>(&mut self) -> S {
        S::from_f64c(self.next_f64())
    }

    /// One N(mean, std^2) draw via Box-Muller. std = 0 returns mean exactly.
    pub fn gauss<S: Scalar>(&mut self, mean: f64, std: f64) -> S {
        assert!(std >= 0.0, "negative std");
        if std == 0.0 {
            return S::from_f64c(mean);
        }
        let z = match self.spare_gauss.take() {
            Some(z) => z,
            None => {
                // u in (0, 1] so ln(u) is finite.
                let u = 1.0 - self.next_f64();
                let v = self.next_f64();
                let r = (-2.0 * u.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * v;
                self.spare_gauss = Some(r * theta.sin());
                r * theta.cos()
            }
        };
        S::from_f64c(mean + std * z)
    }

    /// n gaussian draws.
    pub fn gaussian<S: Scalar>(&mut self, mean: f64, std: f64, n: usize) -> Vec<S> {
        (0..n).map(|_| self.gauss(mean, std)).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// A uniformly chosen k-subset of 0..n, in ascending order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first k slots end up a uniform subset.
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        let mut picked = idx[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ga: Vec<f64> = Rng::new(7).gaussian(0.0, 1.0, 32);
        let gb: Vec<f64> = Rng::new(7).gaussian(0.0, 1.0, 32);
        assert_eq!(ga, gb);
    }

    #[test]
    fn streams_are_independent_of_parent_draws() {
        let root = Rng::new(99);
        let s1 = root.stream(1);
        let mut root2 = Rng::new(99);
        root2.next_u64();
        root2.next_u64();
        let s1b = root2.stream(1);
        assert_eq!(s1, s1b);
        assert_ne!(root.stream(1).next_u64(), root.stream(2).next_u64());
    }

    #[test]
    fn gaussian_degenerate_std_zero() {
        let mut rng = Rng::new(1);
        let xs: Vec<f64> = rng.gaussian(128.0, 0.0, 4);
        assert_eq!(xs, vec![128.0; 4]);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(2024);
        let xs: Vec<f64> = rng.gaussian(0.0, 10.0, 10_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        let std = var.sqrt();
        assert!((9.5..=10.5).contains(&std), "sample std {std}");
        assert!(mean.abs() < 0.5, "sample mean {mean}");
    }

    #[test]
    fn uniform_below_in_range() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let x = rng.next_below(7);
            assert!(x < 7);
        }
    }

    #[test]
    fn choose_indices_is_a_subset() {
        let mut rng = Rng::new(4);
        let picked = rng.choose_indices(100, 10);
        assert_eq!(picked.len(), 10);
        let mut seen = picked.clone();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert!(picked.iter().all(|&i| i < 100));
    }
}
