//! Reproducible splittable random streams and Gaussian sampling.
//!
//! Streams are built on the counter-based ChaCha generator: a (seed,
//! stream-id) pair selects an independent keystream, so Monte-Carlo workers
//! can each own a stream and still be bitwise reproducible.

use crate::linalg::{cholesky_jittered, LinalgError, Matrix};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One reproducible random stream, advanced explicitly by value.
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

    /// A derived stream with the same seed and a different stream-id.
    pub fn substream(&self, stream_id: u64) -> Self {
        RngStream::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (no cached spare, to keep the draw
    /// sequence a pure function of the stream position).
    pub fn standard_normal(&mut self) -> f64 {
        let u1: f64 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Draw from N(mean, diag(var)). Zero-variance components return the mean
/// exactly. A draw is consumed for every component so the stream position
/// does not depend on the variance pattern.
pub fn sample_gaussian_diag(mean: &[f64], var_diag: &[f64], rng: &mut RngStream) -> Vec<f64> {
    assert_eq!(mean.len(), var_diag.len());
    mean.iter()
        .zip(var_diag)
        .map(|(&m, &v)| {
            let z = rng.standard_normal();
            if v > 0.0 {
                m + v.sqrt() * z
            } else {
                m
            }
        })
        .collect()
}

/// Draw from N(mean, cov) for a full covariance matrix via Cholesky.
pub fn sample_gaussian_full(
    mean: &[f64],
    cov: &Matrix,
    rng: &mut RngStream,
) -> Result<Vec<f64>, LinalgError> {
    assert_eq!(mean.len(), cov.nrows());
    let (l, _) = cholesky_jittered(cov)?;
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.standard_normal()).collect();
    let mut out = mean.to_vec();
    for i in 0..mean.len() {
        for j in 0..=i {
            out[i] += l[(i, j)] * z[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_per_stream() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let mut rng = RngStream::new(1, 0);
        let x = sample_gaussian_diag(&[3.0, -2.0], &[0.0, 0.0], &mut rng);
        assert_eq!(x, vec![3.0, -2.0]);
    }

    #[test]
    fn zero_variance_component_is_exact() {
        // case-study initial condition: third diagonal is exactly zero
        let mut rng = RngStream::new(7, 0);
        for _ in 0..100 {
            let x = sample_gaussian_diag(&[1.0, 150.0, 0.0], &[1e-3, 22.5, 0.0], &mut rng);
            assert_eq!(x[2], 0.0);
        }
    }

    #[test]
    fn standard_normal_statistics() {
        let mut rng = RngStream::new(2024, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn full_covariance_sampling_matches_target() {
        let cov = Matrix::from_rows(&[vec![2.0, 0.8], vec![0.8, 1.0]]);
        let mut rng = RngStream::new(5, 0);
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        let mut sum_xy = 0.0;
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..n {
            let x = sample_gaussian_full(&[1.0, -1.0], &cov, &mut rng).unwrap();
            sum[0] += x[0];
            sum[1] += x[1];
            sum_sq[0] += x[0] * x[0];
            sum_sq[1] += x[1] * x[1];
            sum_xy += x[0] * x[1];
        }
        let m = [sum[0] / n as f64, sum[1] / n as f64];
        let v0 = sum_sq[0] / n as f64 - m[0] * m[0];
        let cxy = sum_xy / n as f64 - m[0] * m[1];
        assert!((m[0] - 1.0).abs() < 0.02 && (m[1] + 1.0).abs() < 0.02);
        assert!((v0 - 2.0).abs() < 0.05);
        assert!((cxy - 0.8).abs() < 0.05);
    }

    #[test]
    fn full_covariance_rejects_indefinite() {
        let cov = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let mut rng = RngStream::new(5, 0);
        assert!(sample_gaussian_full(&[0.0, 0.0], &cov, &mut rng).is_err());
    }
}
