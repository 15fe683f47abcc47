//! Empirical-CDF helpers.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("probability {0} not in (0, 1]")]
    InvalidProbability(f64),
}

/// Lower empirical quantile: the smallest sample value v such that the
/// fraction of samples <= v is at least p.
pub fn ecdf_quantile(samples: &[f64], p: f64) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if !(0.0 < p && p <= 1.0) {
        return Err(StatsError::InvalidProbability(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in samples"));
    let n = sorted.len();
    let k = (p * n as f64).ceil() as usize;
    Ok(sorted[k.clamp(1, n) - 1])
}

/// Fraction of samples <= c.
pub fn ecdf_at(samples: &[f64], c: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&x| x <= c).count() as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantile_conventions() {
        assert_eq!(ecdf_quantile(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap(), 4.0);
        assert_eq!(ecdf_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
    }

    #[test]
    fn quantile_count_based_oracle() {
        let mut samples = vec![5.0; 99];
        samples.push(10.0);
        assert_eq!(ecdf_quantile(&samples, 0.99).unwrap(), 5.0);
        assert_eq!(ecdf_quantile(&samples, 0.999).unwrap(), 10.0);
    }

    #[test]
    fn errors() {
        assert_eq!(ecdf_quantile(&[], 0.5), Err(StatsError::EmptySample));
        assert!(ecdf_quantile(&[1.0], 0.0).is_err());
        assert!(ecdf_quantile(&[1.0], 1.5).is_err());
    }

    proptest! {
        /// The returned value is the smallest sample meeting the coverage
        /// requirement (brute-force check against all samples).
        #[test]
        fn quantile_is_smallest_covering_sample(
            mut xs in proptest::collection::vec(-1e3..1e3f64, 1..50),
            p in 0.01..1.0f64,
        ) {
            let q = ecdf_quantile(&xs, p).unwrap();
            let n = xs.len() as f64;
            prop_assert!(ecdf_at(&xs, q) >= p);
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &x in &xs {
                if x < q {
                    prop_assert!((xs.iter().filter(|&&y| y <= x).count() as f64) / n < p);
                }
            }
        }
    }
}
