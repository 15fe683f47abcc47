//! Single-output Gaussian-process regression with a squared-exponential
//! kernel: marginal-likelihood hyperparameter fitting, posterior queries,
//! and O(N^2) recursive conditioning through a block inverse update.

use crate::linalg::{self, cholesky_jittered, LinalgError, Matrix};
use crate::neldermead::{self, NelderMeadOptions};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    NotPositiveDefinite(#[from] LinalgError),
    #[error("singular update: Schur complement {0} <= 1e-12 (duplicate noiseless point?)")]
    SingularUpdate(f64),
    #[error("all {0} optimizer restarts failed")]
    AllRestartsFailed(usize),
}

/// SE-kernel hyperparameters, stored in log-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub log_zeta: f64,
    pub log_lambda: Vec<f64>,
    pub log_sigma_nu: f64,
}

impl Hyperparameters {
    pub fn zeta(&self) -> f64 {
        self.log_zeta.exp()
    }

    pub fn sigma_nu(&self) -> f64 {
        self.log_sigma_nu.exp()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.log_lambda.len()
    }
}

/// ζ² exp(-½ (z - z')ᵀ Λ⁻² (z - z'))
pub fn se_kernel(z: &[f64], z_prime: &[f64], psi: &Hyperparameters) -> f64 {
    assert_eq!(z.len(), z_prime.len());
    assert_eq!(z.len(), psi.input_dim());
    let zeta2 = (2.0 * psi.log_zeta).exp();
    let mut q = 0.0;
    for i in 0..z.len() {
        let inv_l = (-psi.log_lambda[i]).exp();
        let d = (z[i] - z_prime[i]) * inv_l;
        q += d * d;
    }
    zeta2 * (-0.5 * q).exp()
}

fn covariance_matrix(z: &Matrix, psi: &Hyperparameters, noise_flags: &[bool]) -> Matrix {
    let n = z.nrows();
    let sigma2 = (2.0 * psi.log_sigma_nu).exp();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = se_kernel(z.row(i), z.row(j), psi);
            s[(i, j)] = k;
            s[(j, i)] = k;
        }
        if noise_flags[i] {
            s[(i, i)] += sigma2;
        }
    }
    s
}

/// -L(Ψ) = ½ log det Σ_Y + ½ Yᵀ Σ_Y⁻¹ Y, computed via Cholesky.
pub fn neg_log_marginal_likelihood(
    psi: &Hyperparameters,
    z: &Matrix,
    y: &[f64],
) -> Result<f64, GpError> {
    assert!(z.nrows() >= 2, "need at least two observations");
    assert_eq!(z.nrows(), y.len());
    let flags = vec![true; z.nrows()];
    let sigma = covariance_matrix(z, psi, &flags);
    let (l, _) = cholesky_jittered(&sigma)?;
    let log_det: f64 = (0..z.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    // quadratic term via triangular solve
    let mut v = y.to_vec();
    for i in 0..z.nrows() {
        let mut s = v[i];
        for k in 0..i {
            s -= l[(i, k)] * v[k];
        }
        v[i] = s / l[(i, i)];
    }
    let quad: f64 = v.iter().map(|x| x * x).sum();
    Ok(0.5 * log_det + 0.5 * quad)
}

/// Diagnostics from one hyperparameter fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub nll: f64,
    pub grad_inf_norm: f64,
    pub hit_iteration_cap: bool,
    pub restarts_used: usize,
}

const LOG_BOUND: f64 = 7.0;

fn heuristic_start(z: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = z.nrows();
    let d = z.ncols();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_std =
        (y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64).sqrt().max(1e-3);
    let mut p = Vec::with_capacity(d + 2);
    p.push(y_std.ln());
    for j in 0..d {
        let (lo, hi) = (0..n)
            .map(|i| z[(i, j)])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        p.push(((hi - lo).max(1e-3)).ln());
    }
    p.push((0.1 * y_std).ln());
    for v in p.iter_mut() {
        *v = v.clamp(-LOG_BOUND, LOG_BOUND);
    }
    p
}

fn params_to_psi(p: &[f64], d: usize) -> Hyperparameters {
    Hyperparameters {
        log_zeta: p[0],
        log_lambda: p[1..1 + d].to_vec(),
        log_sigma_nu: p[1 + d],
    }
}

/// Maximize the marginal likelihood by multi-start Nelder-Mead in log-space.
/// The caller is expected to pass normalized data.
pub fn fit_hyperparameters(
    z: &Matrix,
    y: &[f64],
    restarts: usize,
    rng: &mut RngStream,
) -> Result<(Hyperparameters, FitReport), GpError> {
    assert!(restarts >= 1);
    let d = z.ncols();
    let dim = d + 2;
    let lower = vec![-LOG_BOUND; dim];
    let upper = vec![LOG_BOUND; dim];
    let objective = |p: &[f64]| {
        neg_log_marginal_likelihood(&params_to_psi(p, d), z, y).unwrap_or(f64::INFINITY)
    };

    let base = heuristic_start(z, y);
    let mut best: Option<neldermead::NelderMeadResult> = None;
    let mut failures = 0;
    for r in 0..restarts {
        let start: Vec<f64> = if r == 0 {
            base.clone()
        } else {
            base.iter()
                .map(|&v| (v + 0.5 * rng.standard_normal()).clamp(-LOG_BOUND, LOG_BOUND))
                .collect()
        };
        let res = neldermead::minimize(
            objective,
            &start,
            &lower,
            &upper,
            &NelderMeadOptions { max_iters: 400 * dim, ..Default::default() },
        );
        if !res.f.is_finite() {
            failures += 1;
            continue;
        }
        if best.as_ref().map_or(true, |b| res.f < b.f) {
            best = Some(res);
        }
    }
    let best = best.ok_or(GpError::AllRestartsFailed(failures))?;

    // finite-difference gradient check at the returned point
    let mut grad_inf = 0.0f64;
    let h = 1e-5;
    for i in 0..dim {
        let mut p_hi = best.x.clone();
        let mut p_lo = best.x.clone();
        p_hi[i] = (p_hi[i] + h).min(LOG_BOUND);
        p_lo[i] = (p_lo[i] - h).max(-LOG_BOUND);
        let f_hi = objective(&p_hi);
        let f_lo = objective(&p_lo);
        if f_hi.is_finite() && f_lo.is_finite() && p_hi[i] > p_lo[i] {
            grad_inf = grad_inf.max(((f_hi - f_lo) / (p_hi[i] - p_lo[i])).abs());
        }
    }
    let report = FitReport {
        nll: best.f,
        grad_inf_norm: grad_inf,
        hit_iteration_cap: !best.converged,
        restarts_used: restarts,
    };
    Ok((params_to_psi(&best.x, d), report))
}

/// Posterior-ready GP: training data plus the explicit inverse covariance.
#[derive(Debug, Clone)]
pub struct GPModel {
    z: Matrix,
    y: Vec<f64>,
    psi: Hyperparameters,
    inv_cov: Matrix,
    alpha: Vec<f64>,
    noise_flags: Vec<bool>,
}

/// Serialized form: the inverse covariance is rebuilt on load, never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GPModelData {
    pub z: Matrix,
    pub y: Vec<f64>,
    pub psi: Hyperparameters,
    pub noise_flags: Vec<bool>,
}

impl GPModel {
    /// Batch construction: builds Σ_Y from scratch and inverts it.
    pub fn new(
        z: Matrix,
        y: Vec<f64>,
        psi: Hyperparameters,
        noise_flags: Vec<bool>,
    ) -> Result<Self, GpError> {
        assert_eq!(z.nrows(), y.len());
        assert_eq!(z.nrows(), noise_flags.len());
        assert_eq!(z.ncols(), psi.input_dim());
        let sigma = covariance_matrix(&z, &psi, &noise_flags);
        let (_, jitter) = cholesky_jittered(&sigma)?;
        let mut sigma_j = sigma;
        if jitter > 0.0 {
            for i in 0..sigma_j.nrows() {
                sigma_j[(i, i)] += jitter;
            }
        }
        let inv_cov = linalg::inv_psd(&sigma_j)?;
        let alpha = inv_cov.matvec(&y);
        Ok(GPModel { z, y, psi, inv_cov, alpha, noise_flags })
    }

    pub fn from_data(data: GPModelData) -> Result<Self, GpError> {
        GPModel::new(data.z, data.y, data.psi, data.noise_flags)
    }

    pub fn to_data(&self) -> GPModelData {
        GPModelData {
            z: self.z.clone(),
            y: self.y.clone(),
            psi: self.psi.clone(),
            noise_flags: self.noise_flags.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn psi(&self) -> &Hyperparameters {
        &self.psi
    }

    pub fn training_inputs(&self) -> &Matrix {
        &self.z
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn noise_flags(&self) -> &[bool] {
        &self.noise_flags
    }

    pub fn inv_cov(&self) -> &Matrix {
        &self.inv_cov
    }

    fn check_dim(&self, z: &[f64]) -> Result<(), GpError> {
        if z.len() != self.z.ncols() {
            return Err(GpError::DimensionMismatch { expected: self.z.ncols(), got: z.len() });
        }
        Ok(())
    }

    pub fn kernel_vec(&self, z: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| se_kernel(z, self.z.row(i), &self.psi)).collect()
    }

    /// Posterior mean only; O(N) given the cached alpha vector.
    pub fn posterior_mean(&self, z: &[f64]) -> Result<f64, GpError> {
        self.check_dim(z)?;
        let zeta2 = (2.0 * self.psi.log_zeta).exp();
        let d = z.len();
        let inv_l: Vec<f64> = self.psi.log_lambda.iter().map(|l| (-l).exp()).collect();
        let mut mean = 0.0;
        for i in 0..self.len() {
            let row = self.z.row(i);
            let mut q = 0.0;
            for j in 0..d {
                let dd = (z[j] - row[j]) * inv_l[j];
                q += dd * dd;
            }
            mean += zeta2 * (-0.5 * q).exp() * self.alpha[i];
        }
        Ok(mean)
    }

    /// Posterior mean and variance; the variance is clamped to [0, ζ²].
    pub fn posterior(&self, z: &[f64]) -> Result<(f64, f64), GpError> {
        self.check_dim(z)?;
        let k = self.kernel_vec(z);
        let mean = linalg::dot(&k, &self.alpha);
        let mk = self.inv_cov.matvec(&k);
        let zeta2 = (2.0 * self.psi.log_zeta).exp();
        let var = (zeta2 - linalg::dot(&k, &mk)).clamp(0.0, zeta2);
        Ok((mean, var))
    }

    /// Append one observation, updating the inverse covariance with the
    /// bordered-matrix formula. Hyperparameters stay fixed.
    pub fn condition(&self, z_new: &[f64], y_new: f64, noiseless: bool) -> Result<Self, GpError> {
        self.check_dim(z_new)?;
        let k_new = self.kernel_vec(z_new);
        let mut kappa = se_kernel(z_new, z_new, &self.psi);
        if !noiseless {
            kappa += (2.0 * self.psi.log_sigma_nu).exp();
        }
        let w = self.inv_cov.matvec(&k_new);
        let schur = kappa - linalg::dot(&k_new, &w);
        if schur <= 1e-12 {
            return Err(GpError::SingularUpdate(schur));
        }
        let inv_cov = block_inverse_update(&self.inv_cov, &k_new, kappa)?;

        // incremental alpha via the residual form: exactly preserves the
        // mean function when conditioning on the model's own prediction,
        // where recomputing inv_cov_new * y would amplify roundoff by 1/s
        let residual = y_new - linalg::dot(&k_new, &self.alpha);
        let gain = residual / schur;
        let mut alpha: Vec<f64> =
            self.alpha.iter().zip(&w).map(|(a, wi)| a - wi * gain).collect();
        alpha.push(gain);

        let n = self.len();
        let mut z = Matrix::zeros(n + 1, self.z.ncols());
        for i in 0..n {
            z.row_mut(i).copy_from_slice(self.z.row(i));
        }
        z.row_mut(n).copy_from_slice(z_new);
        let mut y = self.y.clone();
        y.push(y_new);
        let mut noise_flags = self.noise_flags.clone();
        noise_flags.push(!noiseless);
        Ok(GPModel { z, y, psi: self.psi.clone(), inv_cov, alpha, noise_flags })
    }
}

/// Inverse of the bordered matrix [[Σ, k], [kᵀ, κ]] given Σ⁻¹.
pub fn block_inverse_update(
    inv_cov: &Matrix,
    k_new: &[f64],
    kappa: f64,
) -> Result<Matrix, GpError> {
    let n = inv_cov.nrows();
    assert_eq!(k_new.len(), n);
    let w = inv_cov.matvec(k_new); // Σ⁻¹ k
    let schur = kappa - linalg::dot(k_new, &w);
    if schur <= 1e-12 {
        return Err(GpError::SingularUpdate(schur));
    }
    let inv_s = 1.0 / schur;
    let mut out = Matrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = inv_cov[(i, j)] + w[i] * w[j] * inv_s;
        }
        out[(i, n)] = -w[i] * inv_s;
        out[(n, i)] = -w[i] * inv_s;
    }
    out[(n, n)] = inv_s;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::inv_psd;

    fn psi(zeta: f64, lambda: &[f64], sigma: f64) -> Hyperparameters {
        Hyperparameters {
            log_zeta: zeta.ln(),
            log_lambda: lambda.iter().map(|l| l.ln()).collect(),
            log_sigma_nu: sigma.ln(),
        }
    }

    #[test]
    fn kernel_zero_distance_and_analytic() {
        let p = psi(1.4, &[1.0, 2.0], 0.1);
        let z = [0.3, -0.7];
        assert!((se_kernel(&z, &z, &p) - 1.4 * 1.4).abs() < 1e-14);

        let p1 = psi(1.0, &[1.0, 1.0], 0.1);
        let a = [2.0_f64.sqrt(), 0.0];
        let b = [0.0, 0.0];
        assert!((se_kernel(&a, &b, &p1) - (-1.0f64).exp()).abs() < 1e-14);
        // symmetry
        assert_eq!(se_kernel(&a, &b, &p1), se_kernel(&b, &a, &p1));
    }

    #[test]
    fn kernel_matches_direct_formula_random() {
        let mut rng = RngStream::new(11, 0);
        let p = psi(0.8, &[0.5, 2.0, 1.3], 0.1);
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let q: f64 = (0..3)
                .map(|i| ((a[i] - b[i]) / p.lambda()[i]).powi(2))
                .sum();
            let expect = 0.8f64.powi(2) * (-0.5 * q).exp();
            assert!((se_kernel(&a, &b, &p) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn gram_matrix_is_psd() {
        let mut rng = RngStream::new(3, 0);
        let p = psi(1.0, &[1.0, 1.0], 0.1);
        let rows: Vec<Vec<f64>> =
            (0..50).map(|_| (0..2).map(|_| rng.standard_normal()).collect()).collect();
        let z = Matrix::from_rows(&rows);
        let gram = covariance_matrix(&z, &p, &vec![false; 50]);
        // min eigenvalue >= -1e-8, checked through Cholesky of gram + 1e-8 I
        let mut shifted = gram;
        for i in 0..50 {
            shifted[(i, i)] += 1e-8;
        }
        assert!(crate::linalg::cholesky(&shifted).is_ok());
    }

    #[test]
    fn nll_zero_targets_is_half_logdet() {
        let p = psi(1.0, &[1.0], 0.3);
        let z = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        let y = [0.0, 0.0];
        let nll = neg_log_marginal_likelihood(&p, &z, &y).unwrap();
        let flags = [true, true];
        let sigma = covariance_matrix(&z, &p, &flags);
        let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
        assert!((nll - 0.5 * det.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_diagonal_limit_closed_form() {
        // points far apart relative to the length-scale: Σ_Y ≈ (ζ²+σ²) I
        let p = psi(1.2, &[0.01], 0.4);
        let z = Matrix::from_rows(&[vec![0.0], vec![100.0], vec![200.0], vec![300.0]]);
        let y = [0.5, -1.0, 0.25, 2.0];
        let nll = neg_log_marginal_likelihood(&p, &z, &y).unwrap();
        let s = 1.2f64.powi(2) + 0.4f64.powi(2);
        let expect: f64 = y.iter().map(|yi| 0.5 * s.ln() + yi * yi / (2.0 * s)).sum();
        assert!((nll - expect).abs() < 1e-9, "{nll} vs {expect}");
    }

    #[test]
    fn nll_matches_direct_dense_evaluation() {
        let mut rng = RngStream::new(21, 0);
        let p = psi(0.9, &[1.5, 0.7], 0.2);
        let rows: Vec<Vec<f64>> =
            (0..10).map(|_| (0..2).map(|_| rng.standard_normal()).collect()).collect();
        let z = Matrix::from_rows(&rows);
        let y: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
        let nll = neg_log_marginal_likelihood(&p, &z, &y).unwrap();

        let sigma = covariance_matrix(&z, &p, &vec![true; 10]);
        let inv = inv_psd(&sigma).unwrap();
        let quad = linalg::dot(&y, &inv.matvec(&y));
        let l = crate::linalg::cholesky(&sigma).unwrap();
        let logdet: f64 = (0..10).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        assert!((nll - (0.5 * logdet + 0.5 * quad)).abs() < 1e-9);
    }

    #[test]
    fn posterior_single_point_closed_form() {
        let zeta = 1.3;
        let sigma = 0.25;
        let p = psi(zeta, &[1.0], sigma);
        let gp = GPModel::new(
            Matrix::from_rows(&[vec![0.5]]),
            vec![2.0],
            p,
            vec![true],
        )
        .unwrap();
        let (m, v) = gp.posterior(&[0.5]).unwrap();
        let z2 = zeta * zeta;
        let s2 = sigma * sigma;
        assert!((m - z2 * 2.0 / (z2 + s2)).abs() < 1e-12);
        assert!((v - (z2 - z2 * z2 / (z2 + s2))).abs() < 1e-12);
    }

    #[test]
    fn posterior_prior_recovery_far_away() {
        let p = psi(1.5, &[1.0], 0.1);
        let gp = GPModel::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0]]),
            vec![1.0, -1.0],
            p,
            vec![true, true],
        )
        .unwrap();
        let (m, v) = gp.posterior(&[1000.0]).unwrap();
        assert!(m.abs() < 1e-10);
        assert!((v - 1.5 * 1.5).abs() < 1e-10);
    }

    #[test]
    fn noiseless_point_is_interpolated_exactly() {
        let p = psi(1.0, &[1.0], 0.2);
        let gp = GPModel::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0]]),
            vec![0.3, -0.6],
            p,
            vec![true, true],
        )
        .unwrap();
        let gp2 = gp.condition(&[0.4], 0.9, true).unwrap();
        let (m, v) = gp2.posterior(&[0.4]).unwrap();
        assert!((m - 0.9).abs() <= 1e-8);
        assert!(v <= 1e-8);
        // hyperparameters bit-identical
        assert_eq!(gp2.psi(), gp.psi());
    }

    #[test]
    fn block_inverse_trivial_diagonal() {
        let inv = Matrix::from_rows(&[vec![1.0 / 3.0]]);
        let out = block_inverse_update(&inv, &[0.0], 5.0).unwrap();
        assert!((out[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out[(1, 1)] - 0.2).abs() < 1e-15);
        assert_eq!(out[(0, 1)], 0.0);
    }

    #[test]
    fn block_inverse_matches_dense_inverse() {
        let mut rng = RngStream::new(9, 0);
        for n in [1usize, 5, 10, 30] {
            // random PD base
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..n).map(|_| rng.standard_normal()).collect()).collect();
            let b = Matrix::from_rows(&rows);
            let mut a = b.matmul(&b.transpose());
            for i in 0..n {
                a[(i, i)] += n as f64;
            }
            let k: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let kappa = 2.0 * n as f64;

            let inv = inv_psd(&a).unwrap();
            let updated = block_inverse_update(&inv, &k, kappa).unwrap();

            let mut bordered = Matrix::zeros(n + 1, n + 1);
            for i in 0..n {
                for j in 0..n {
                    bordered[(i, j)] = a[(i, j)];
                }
                bordered[(i, n)] = k[i];
                bordered[(n, i)] = k[i];
            }
            bordered[(n, n)] = kappa;
            let direct = inv_psd(&bordered).unwrap();
            assert!(updated.max_abs_diff(&direct) <= 1e-8, "n = {n}");
        }
    }

    #[test]
    fn block_inverse_detects_zero_schur() {
        let inv = Matrix::from_rows(&[vec![0.5]]);
        // kappa exactly equals kᵀ Σ⁻¹ k
        let k = [2.0];
        let kappa = 2.0 * 0.5 * 2.0;
        assert!(matches!(
            block_inverse_update(&inv, &k, kappa),
            Err(GpError::SingularUpdate(_))
        ));
    }

    fn batch_rebuild(gp: &GPModel) -> GPModel {
        GPModel::new(
            gp.training_inputs().clone(),
            gp.targets().to_vec(),
            gp.psi().clone(),
            gp.noise_flags().to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn condition_matches_batch_rebuild() {
        let mut rng = RngStream::new(17, 0);
        let p = psi(1.0, &[1.0, 1.0], 0.3);
        let rows: Vec<Vec<f64>> =
            (0..5).map(|_| (0..2).map(|_| rng.standard_normal()).collect()).collect();
        let z = Matrix::from_rows(&rows);
        let y: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let mut gp = GPModel::new(z, y, p, vec![true; 5]).unwrap();

        for step in 0..10 {
            let zn: Vec<f64> = (0..2).map(|_| rng.standard_normal()).collect();
            let yn = rng.standard_normal();
            let noiseless = step % 2 == 0;
            gp = gp.condition(&zn, yn, noiseless).unwrap();
        }
        let rebuilt = batch_rebuild(&gp);
        for _ in 0..20 {
            let q: Vec<f64> = (0..2).map(|_| 2.0 * rng.standard_normal()).collect();
            let (m1, v1) = gp.posterior(&q).unwrap();
            let (m2, v2) = rebuilt.posterior(&q).unwrap();
            assert!((m1 - m2).abs() <= 1e-8, "mean {m1} vs {m2}");
            assert!((v1 - v2).abs() <= 1e-8, "var {v1} vs {v2}");
        }
    }

    #[test]
    fn conditioning_never_increases_variance_at_point() {
        let mut rng = RngStream::new(23, 0);
        let p = psi(1.0, &[1.0], 0.2);
        let gp = GPModel::new(
            Matrix::from_rows(&[vec![0.0], vec![2.0]]),
            vec![0.1, -0.4],
            p,
            vec![true, true],
        )
        .unwrap();
        for _ in 0..10 {
            let zq = [rng.uniform_range(-1.0, 3.0)];
            let (_, v_before) = gp.posterior(&zq).unwrap();
            let gp2 = gp.condition(&zq, 0.0, false).unwrap();
            let (_, v_after) = gp2.posterior(&zq).unwrap();
            assert!(v_after <= v_before + 1e-12);
        }
    }

    #[test]
    fn posterior_mean_matches_full_posterior() {
        let mut rng = RngStream::new(31, 0);
        let p = psi(0.7, &[1.1, 0.9, 1.4], 0.15);
        let rows: Vec<Vec<f64>> =
            (0..12).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
        let z = Matrix::from_rows(&rows);
        let y: Vec<f64> = (0..12).map(|_| rng.standard_normal()).collect();
        let gp = GPModel::new(z, y, p, vec![true; 12]).unwrap();
        for _ in 0..10 {
            let q: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let (m, _) = gp.posterior(&q).unwrap();
            assert!((gp.posterior_mean(&q).unwrap() - m).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_recovers_noise_scale() {
        // data from a known GP: zeta=1, lambda=[1,1], sigma=0.1, N=80
        let mut rng = RngStream::new(101, 0);
        let p_true = psi(1.0, &[1.0, 1.0], 0.1);
        let rows: Vec<Vec<f64>> =
            (0..80).map(|_| (0..2).map(|_| 1.5 * rng.standard_normal()).collect()).collect();
        let z = Matrix::from_rows(&rows);
        // sample from the prior: y ~ N(0, K + σ² I)
        let flags = vec![true; 80];
        let k = covariance_matrix(&z, &p_true, &flags);
        let y = crate::rng::sample_gaussian_full(&vec![0.0; 80], &k, &mut rng).unwrap();

        let (fitted, report) = fit_hyperparameters(&z, &y, 3, &mut rng).unwrap();
        let s = fitted.sigma_nu();
        assert!(
            s >= 0.05 && s <= 0.2,
            "recovered sigma_nu {s} outside x/÷2 of the truth (report {report:?})"
        );
    }

    #[test]
    fn fit_duplicate_inputs_force_noise() {
        let z = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 0.5],
        ]);
        let y = vec![1.0, -1.0, 0.5, -0.5, 0.0];
        let mut rng = RngStream::new(5, 0);
        let (fitted, _) = fit_hyperparameters(&z, &y, 3, &mut rng).unwrap();
        assert!(fitted.sigma_nu() > 0.05, "sigma_nu = {}", fitted.sigma_nu());
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng_a = RngStream::new(77, 0);
        let mut rng_b = RngStream::new(77, 0);
        let z = Matrix::from_rows(&[
            vec![0.0],
            vec![0.5],
            vec![1.0],
            vec![1.5],
            vec![2.0],
            vec![2.5],
        ]);
        let y = vec![0.0, 0.4, 0.8, 0.9, 0.7, 0.2];
        let (a, _) = fit_hyperparameters(&z, &y, 5, &mut rng_a).unwrap();
        let (b, _) = fit_hyperparameters(&z, &y, 5, &mut rng_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_improves_on_heuristic_start() {
        let mut rng = RngStream::new(13, 0);
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| vec![rng.standard_normal()]).collect();
        let z = Matrix::from_rows(&rows);
        let y: Vec<f64> = (0..20).map(|i| (z[(i, 0)]).sin() + 0.05 * rng.standard_normal()).collect();
        let start = heuristic_start(&z, &y);
        let f_start = neg_log_marginal_likelihood(&params_to_psi(&start, 1), &z, &y).unwrap();
        let (fitted, report) = fit_hyperparameters(&z, &y, 2, &mut rng).unwrap();
        let f_fit = neg_log_marginal_likelihood(&fitted, &z, &y).unwrap();
        assert!(f_fit <= f_start + 1e-9, "fit {f_fit} vs start {f_start}");
        assert!((report.nll - f_fit).abs() < 1e-9);
    }

    #[test]
    fn serde_round_trip_rebuilds_inverse() {
        let p = psi(1.0, &[1.0], 0.2);
        let gp = GPModel::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]),
            vec![0.1, 0.5, -0.2],
            p,
            vec![true, true, false],
        )
        .unwrap();
        let json = serde_json::to_string(&gp.to_data()).unwrap();
        let restored = GPModel::from_data(serde_json::from_str(&json).unwrap()).unwrap();
        let (m1, v1) = gp.posterior(&[0.7]).unwrap();
        let (m2, v2) = restored.posterior(&[0.7]).unwrap();
        assert!((m1 - m2).abs() < 1e-10 && (v1 - v2).abs() < 1e-10);
    }

    #[test]
    fn inv_cov_consistency_invariant() {
        let p = psi(1.0, &[1.0], 0.2);
        let gp = GPModel::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.5]]),
            vec![0.1, 0.5, -0.2],
            p,
            vec![true, true, true],
        )
        .unwrap();
        let sigma = covariance_matrix(gp.training_inputs(), gp.psi(), gp.noise_flags());
        let prod = gp.inv_cov().matmul(&sigma);
        assert!(prod.max_abs_diff(&Matrix::identity(3)) <= 1e-7);
        // alpha = inv_cov · Y
        let alpha = gp.inv_cov().matvec(gp.targets());
        for (a, b) in alpha.iter().zip(gp.inv_cov().matvec(gp.targets()).iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}
