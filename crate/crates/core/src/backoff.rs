//! Offline constraint tightening: joint-satisfaction statistic, empirical
//! CDF bound (Clopper-Pearson), initial back-offs from the ecdf quantile
//! rule, and the bisection on the back-off factor gamma.

use crate::linalg::Matrix;
use crate::rng::RngStream;
use crate::special::{betainv, SpecialError};
use crate::stats::{ecdf_quantile, StatsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackoffError {
    #[error("S * beta_hat = {0} is not integral: beta_hat must come from counts")]
    NonIntegralCount(f64),
    #[error("invalid argument: {0}")]
    DomainError(String),
    #[error(transparent)]
    Special(#[from] SpecialError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("MC sample {sample} failed: {message}")]
    SampleFailed { sample: u64, message: String },
}

/// Constraint evaluations for S Monte-Carlo closed-loop samples; each
/// entry is a (T+1) x n_g matrix of g_j^(t) values.
#[derive(Debug, Clone)]
pub struct ConstraintSamples {
    pub values: Vec<Matrix>,
    pub sample_ids: Vec<u64>,
}

impl ConstraintSamples {
    /// Per-sample joint statistic.
    pub fn stats(&self) -> Vec<f64> {
        self.values.iter().map(joint_satisfaction_stat).collect()
    }

    /// All S values of one (t, j) entry.
    pub fn slice(&self, t: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(t, j)]).collect()
    }
}

/// Back-offs b = gamma * b_tilde, with the t = 0 row pinned at zero (the
/// initial state is measured, not predicted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackoffTable {
    pub b: Matrix,
    pub b_tilde: Matrix,
    pub gamma: f64,
}

impl BackoffTable {
    pub fn zeros(t_horizon: usize, n_g: usize) -> Self {
        BackoffTable {
            b: Matrix::zeros(t_horizon + 1, n_g),
            b_tilde: Matrix::zeros(t_horizon + 1, n_g),
            gamma: 0.0,
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        assert!(gamma >= 0.0);
        let mut b = Matrix::zeros(self.b_tilde.nrows(), self.b_tilde.ncols());
        for t in 1..self.b_tilde.nrows() {
            for j in 0..self.b_tilde.ncols() {
                b[(t, j)] = gamma * self.b_tilde[(t, j)];
            }
        }
        BackoffTable { b, b_tilde: self.b_tilde.clone(), gamma }
    }

    pub fn backoff(&self, t: usize, j: usize) -> f64 {
        self.b[(t, j)]
    }

    pub fn n_g(&self) -> usize {
        self.b.ncols()
    }

    pub fn t_horizon(&self) -> usize {
        self.b.nrows() - 1
    }

    /// CSV rows: t, j, b, b_tilde (j is 1-based to match g_j naming).
    pub fn to_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "j", "b", "b_tilde"])?;
        for t in 0..self.b.nrows() {
            for j in 0..self.b.ncols() {
                wtr.write_record(&[
                    t.to_string(),
                    (j + 1).to_string(),
                    format!("{}", self.b[(t, j)]),
                    format!("{}", self.b_tilde[(t, j)]),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackoffConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub s: usize,
    pub n_b: usize,
    /// Upper end of the initial gamma bracket.
    pub gamma_upper: f64,
    /// Redraw sample seeds every iteration instead of reusing frozen
    /// per-sample seeds (common random numbers).
    pub fresh_samples: bool,
    pub workers: usize,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        BackoffConfig {
            epsilon: 0.1,
            alpha: 0.01,
            delta: 0.1,
            s: 1000,
            n_b: 16,
            gamma_upper: 4.0,
            fresh_samples: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub gamma: f64,
    pub beta_hat: f64,
    pub beta_lb: f64,
    pub bracket: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackoffRunReport {
    pub iterations: Vec<IterationRecord>,
    pub table: BackoffTable,
    pub converged: bool,
    /// h(0) >= 0: the controller is already probabilistically feasible
    /// without back-offs and the bisection has no bracket.
    pub no_sign_change: bool,
    pub beta_hat: f64,
    pub beta_lb: f64,
}

/// Joint satisfaction statistic: max over all (t, j) constraint values,
/// so stat <= 0 exactly when every constraint is satisfied.
pub fn joint_satisfaction_stat(g: &Matrix) -> f64 {
    g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Fraction of samples with joint statistic <= 0.
pub fn ecdf_joint(stats: &[f64]) -> f64 {
    assert!(!stats.is_empty());
    stats.iter().filter(|&&v| v <= 0.0).count() as f64 / stats.len() as f64
}

/// Clopper-Pearson lower confidence bound on the satisfaction probability:
/// betainv(alpha, S*beta_hat, S - S*beta_hat + 1), with the degenerate
/// endpoints handled in closed form.
pub fn clopper_lower(beta_hat: f64, s: usize, alpha: f64) -> Result<f64, BackoffError> {
    if !(0.0..=1.0).contains(&beta_hat) || s == 0 || !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(BackoffError::DomainError(format!(
            "beta_hat = {beta_hat}, S = {s}, alpha = {alpha}"
        )));
    }
    let count = beta_hat * s as f64;
    if (count - count.round()).abs() > 1e-9 {
        return Err(BackoffError::NonIntegralCount(count));
    }
    let k = count.round();
    if k == 0.0 {
        return Ok(0.0);
    }
    if k as usize == s {
        // Beta(S, 1) quantile in closed form
        return Ok(alpha.powf(1.0 / s as f64));
    }
    Ok(betainv(alpha, k, s as f64 - k + 1.0)?)
}

/// Initial back-offs: per (t, j) the (1 - delta) ecdf quantile of the
/// sampled constraint values minus the nominal value, floored at zero;
/// the t = 0 row stays zero.
pub fn initial_backoffs(
    samples: &ConstraintSamples,
    nominal: &Matrix,
    delta: f64,
) -> Result<Matrix, BackoffError> {
    assert!(!samples.values.is_empty());
    let t_rows = nominal.nrows();
    let n_g = nominal.ncols();
    let mut b_tilde = Matrix::zeros(t_rows, n_g);
    for t in 1..t_rows {
        for j in 0..n_g {
            let g = samples.slice(t, j);
            let q = ecdf_quantile(&g, 1.0 - delta)?;
            b_tilde[(t, j)] = (q - nominal[(t, j)]).max(0.0);
        }
    }
    Ok(b_tilde)
}

/// One closed-loop Monte-Carlo rollout under the given back-off table,
/// keyed by a reproducible stream id; returns the (T+1) x n_g matrix of
/// constraint values. A nominal rollout is requested with `nominal = true`.
pub trait ConstraintSampler: Sync {
    fn sample(&self, table: &BackoffTable, stream: u64) -> Result<Matrix, String>;
    fn nominal(&self, table: &BackoffTable) -> Result<Matrix, String>;
}

fn run_batch<M: ConstraintSampler>(
    sampler: &M,
    table: &BackoffTable,
    streams: &[u64],
    workers: usize,
) -> Result<ConstraintSamples, BackoffError> {
    let results: Vec<Result<Matrix, BackoffError>> = if workers > 1 {
        streams
            .par_iter()
            .map(|&s| {
                sampler
                    .sample(table, s)
                    .map_err(|message| BackoffError::SampleFailed { sample: s, message })
            })
            .collect()
    } else {
        streams
            .iter()
            .map(|&s| {
                sampler
                    .sample(table, s)
                    .map_err(|message| BackoffError::SampleFailed { sample: s, message })
            })
            .collect()
    };
    let values = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ConstraintSamples { values, sample_ids: streams.to_vec() })
}

/// Algorithm: iteration 0 runs S samples at b = 0, freezes the initial
/// back-offs b_tilde and evaluates h(0) = beta_lb - (1 - epsilon); when
/// h(0) < 0 the factor gamma is bisected over [0, gamma_upper] for n_b
/// iterations, re-running the S samples at each midpoint. Per-sample
/// stream ids are frozen across iterations by default (common random
/// numbers) so h is monotone-ish in gamma.
pub fn run_backoff_iterations<M: ConstraintSampler>(
    config: &BackoffConfig,
    sampler: &M,
    t_horizon: usize,
    n_g: usize,
    rng: &mut RngStream,
) -> Result<BackoffRunReport, BackoffError> {
    let base = rng.next_u64() >> 1; // headroom for per-iteration offsets
    let streams_for = |iteration: usize| -> Vec<u64> {
        let offset = if config.fresh_samples { iteration as u64 * config.s as u64 } else { 0 };
        (0..config.s as u64).map(|s| base + offset + s).collect()
    };

    // iteration 0: zero back-offs
    let mut table = BackoffTable::zeros(t_horizon, n_g);
    let samples = run_batch(sampler, &table, &streams_for(0), config.workers)?;
    let nominal = sampler
        .nominal(&table)
        .map_err(|message| BackoffError::SampleFailed { sample: u64::MAX, message })?;
    let beta_hat0 = ecdf_joint(&samples.stats());
    let beta_lb0 = clopper_lower(beta_hat0, config.s, config.alpha)?;
    table.b_tilde = initial_backoffs(&samples, &nominal, config.delta)?;

    let mut iterations = vec![IterationRecord {
        iteration: 0,
        gamma: 0.0,
        beta_hat: beta_hat0,
        beta_lb: beta_lb0,
        bracket: (0.0, config.gamma_upper),
    }];

    let mut h_a = beta_lb0 - (1.0 - config.epsilon);
    if h_a >= 0.0 {
        return Ok(BackoffRunReport {
            iterations,
            table: BackoffTable::zeros(t_horizon, n_g),
            converged: false,
            no_sign_change: true,
            beta_hat: beta_hat0,
            beta_lb: beta_lb0,
        });
    }

    let mut a = 0.0;
    let mut b = config.gamma_upper;
    let mut saw_nonnegative = false;
    let (mut beta_hat, mut beta_lb) = (beta_hat0, beta_lb0);
    for iter in 1..=config.n_b {
        let c = 0.5 * (a + b);
        table = table.with_gamma(c);
        let samples = run_batch(sampler, &table, &streams_for(iter), config.workers)?;
        beta_hat = ecdf_joint(&samples.stats());
        beta_lb = clopper_lower(beta_hat, config.s, config.alpha)?;
        let h_c = beta_lb - (1.0 - config.epsilon);
        if h_c >= 0.0 {
            saw_nonnegative = true;
        }
        if h_c.signum() == h_a.signum() {
            a = c;
            h_a = h_c;
        } else {
            b = c;
        }
        iterations.push(IterationRecord {
            iteration: iter,
            gamma: c,
            beta_hat,
            beta_lb,
            bracket: (a, b),
        });
    }

    Ok(BackoffRunReport {
        iterations,
        table,
        converged: saw_nonnegative,
        no_sign_change: false,
        beta_hat,
        beta_lb,
    })
}
