//! Reproducible random streams keyed by `(seed, stream_id)`.
//!
//! Each stream is a ChaCha8 generator seeded from `seed` and placed on the
//! ChaCha stream selected by `stream_id`, so replications can be run in any
//! order or in parallel and still produce the same numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// One N(0, 1) variate (ziggurat).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Overwrites `out` with iid N(0, 1) variates.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }

    pub fn standard_normal_vec(&mut self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        self.fill_normal(&mut v);
        v
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.sample(Open01)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn normal_moments() {
        let mut s = RngStream::new(42, 0);
        let v = s.standard_normal_vec(1_000_000);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 6e-3, "var {var}");
    }

    #[test]
    fn determinism() {
        let a = RngStream::new(9, 3).standard_normal_vec(100);
        let b = RngStream::new(9, 3).standard_normal_vec(100);
        assert_eq!(a, b);
        let c = RngStream::new(9, 4).standard_normal_vec(100);
        assert_ne!(a, c);

        let mut x = RngStream::new(1, 1);
        let mut y = RngStream::new(1, 1);
        for _ in 0..50 {
            assert_eq!(x.uniform().to_bits(), y.uniform().to_bits());
        }
    }

    #[test]
    fn uniform_contract() {
        let mut s = RngStream::new(5, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = s.uniform();
            assert!(u > 0.0 && u < 1.0);
            sum += u;
        }
        let mean = sum / n as f64;
        let tol = 4.0 * (1.0 / 12.0f64).sqrt() / 1e3;
        assert!((mean - 0.5).abs() < tol, "mean {mean}");
    }

    #[test]
    fn kolmogorov_smirnov() {
        let mut v = RngStream::new(2024, 0).standard_normal_vec(100_000);
        v.sort_by(f64::total_cmp);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = v.len() as f64;
        let ks = v.iter().enumerate().fold(0.0f64, |acc, (i, &x)| {
            let f = normal.cdf(x);
            acc.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
        });
        // Asymptotic critical value at the 0.01 level.
        let crit = 1.628 / n.sqrt();
        assert!(ks < crit, "KS {ks} vs {crit}");
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 100_000;
        let a = RngStream::new(77, 0).standard_normal_vec(n);
        let b = RngStream::new(77, 1).standard_normal_vec(n);
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }
}
