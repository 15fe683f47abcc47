//! Semi-batch photobioreactor: ODE right-hand side, fixed-step RK4
//! integration over one sampling interval, noise injection, and the two
//! Sobol-based dataset generators.

use crate::linalg::Matrix;
use crate::rng::{sample_gaussian_diag, RngStream};
use crate::sobol;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("state left the admissible range [0, 1e9] during integration")]
    NonFinite,
    #[error(transparent)]
    Sobol(#[from] sobol::SobolError),
}

/// Bioreactor kinetic parameters. States are [C_X g/L, C_N mg/L, C_qc mg/L],
/// controls are [I umol/m^2/s, F_N mg/L/h].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BioreactorParams {
    pub u_m: f64,
    pub u_d: f64,
    pub k_n: f64,
    pub y_nx: f64,
    pub k_m: f64,
    pub k_d: f64,
    pub k_s: f64,
    pub k_i: f64,
    pub k_sq: f64,
    pub k_iq: f64,
    pub k_np: f64,
}

impl Default for BioreactorParams {
    fn default() -> Self {
        BioreactorParams {
            u_m: 0.0572,
            u_d: 0.0,
            k_n: 393.1,
            y_nx: 504.5,
            k_m: 0.00016,
            k_d: 0.281,
            k_s: 178.9,
            k_i: 447.1,
            k_sq: 23.51,
            k_iq: 800.0,
            k_np: 16.89,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_nu_diag: Vec<f64>,
    pub sigma_omega_diag: Vec<f64>,
    pub x0_mean: Vec<f64>,
    pub x0_cov_diag: Vec<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_nu_diag: vec![4e-4, 0.1, 1e-8],
            sigma_omega_diag: vec![4e-4, 0.1, 1e-8],
            x0_mean: vec![1.0, 150.0, 0.0],
            x0_cov_diag: vec![1e-3, 22.5, 0.0],
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            sigma_nu_diag: vec![0.0; 3],
            sigma_omega_diag: vec![0.0; 3],
            ..NoiseSpec::default()
        }
    }
}

/// Monod growth with Aiba light inhibition. States are clamped at zero
/// before evaluation so stray negative concentrations cannot flip signs.
pub fn rhs(x: &[f64], u: &[f64], p: &BioreactorParams) -> [f64; 3] {
    let c_x = x[0].max(0.0);
    let c_n = x[1].max(0.0);
    let c_qc = x[2].max(0.0);
    let i = u[0];
    let f_n = u[1];
    let light_growth = i / (i + p.k_s + i * i / p.k_i);
    let light_product = i / (i + p.k_sq + i * i / p.k_iq);
    let growth = p.u_m * light_growth * c_x * c_n / (c_n + p.k_n);
    [
        growth - p.u_d * c_x,
        -p.y_nx * growth + f_n,
        p.k_m * light_product * c_x - p.k_d * c_qc / (c_n + p.k_np),
    ]
}

/// Classical RK4 over dt hours split into `substeps` internal steps.
/// The system is non-stiff at the default parameters, so a fixed step
/// suffices; 400 substeps per 20 h interval agrees with an adaptive
/// reference to well under 1e-6 relative.
pub fn step(
    x: &[f64],
    u: &[f64],
    dt: f64,
    p: &BioreactorParams,
    substeps: usize,
) -> Result<Vec<f64>, PlantError> {
    assert!(dt > 0.0 && substeps >= 1);
    let h = dt / substeps as f64;
    let mut state = [x[0], x[1], x[2]];
    for _ in 0..substeps {
        let k1 = rhs(&state, u, p);
        let mid1: Vec<f64> = (0..3).map(|i| state[i] + 0.5 * h * k1[i]).collect();
        let k2 = rhs(&mid1, u, p);
        let mid2: Vec<f64> = (0..3).map(|i| state[i] + 0.5 * h * k2[i]).collect();
        let k3 = rhs(&mid2, u, p);
        let end: Vec<f64> = (0..3).map(|i| state[i] + h * k3[i]).collect();
        let k4 = rhs(&end, u, p);
        for i in 0..3 {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !state[i].is_finite() || state[i] > 1e9 || state[i] < -1e9 {
                return Err(PlantError::NonFinite);
            }
            state[i] = state[i].max(0.0);
        }
    }
    Ok(state.to_vec())
}

/// True plant transition: integrate then add disturbance noise, clamped
/// at zero.
pub fn plant_transition(
    x: &[f64],
    u: &[f64],
    dt: f64,
    p: &BioreactorParams,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<Vec<f64>, PlantError> {
    let next = step(x, u, dt, p, DEFAULT_SUBSTEPS)?;
    let noisy = sample_gaussian_diag(&next, &noise.sigma_omega_diag, rng);
    Ok(noisy.into_iter().map(|v| v.max(0.0)).collect())
}

/// Measurement: additive Gaussian noise, no clamping.
pub fn measure(x_next: &[f64], noise: &NoiseSpec, rng: &mut RngStream) -> Vec<f64> {
    sample_gaussian_diag(x_next, &noise.sigma_nu_diag, rng)
}

pub const DEFAULT_SUBSTEPS: usize = 400;
pub const SAMPLING_TIME_H: f64 = 20.0;

/// Operating box for the type-1 design: [C_X, C_N, C_qc, I, F_N].
pub const TYPE1_BOUNDS: [(f64, f64); 5] =
    [(0.0, 20.0), (50.0, 800.0), (0.0, 0.18), (120.0, 400.0), (0.0, 40.0)];

pub const CONTROL_BOUNDS: [(f64, f64); 2] = [(120.0, 400.0), (0.0, 40.0)];

/// Type-1 dataset: a 5-dimensional Sobol design over the operating box;
/// each row is one noiselessly integrated step observed through
/// measurement noise.
pub fn generate_dataset_type1(
    n: usize,
    p: &BioreactorParams,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<(Matrix, Matrix), PlantError> {
    let lower: Vec<f64> = TYPE1_BOUNDS.iter().map(|b| b.0).collect();
    let upper: Vec<f64> = TYPE1_BOUNDS.iter().map(|b| b.1).collect();
    let z_rows = sobol::sobol(n, 5, &lower, &upper)?;
    let mut y_rows = Vec::with_capacity(n);
    for row in &z_rows {
        let next = step(&row[..3], &row[3..], SAMPLING_TIME_H, p, DEFAULT_SUBSTEPS)?;
        y_rows.push(measure(&next, noise, rng));
    }
    Ok((Matrix::from_rows(&z_rows), Matrix::from_rows(&y_rows)))
}

/// Type-2 dataset: ceil(N/T) open-loop trajectories with Sobol controls,
/// each started from a draw of the initial-condition Gaussian, truncated
/// to exactly N (x_t, u_t) -> y_{t+1} rows.
pub fn generate_dataset_type2(
    n: usize,
    t_horizon: usize,
    p: &BioreactorParams,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<(Matrix, Matrix), PlantError> {
    assert!(n >= t_horizon && t_horizon >= 1);
    let n_traj = n.div_ceil(t_horizon);
    let lower: Vec<f64> = CONTROL_BOUNDS.iter().map(|b| b.0).collect();
    let upper: Vec<f64> = CONTROL_BOUNDS.iter().map(|b| b.1).collect();
    let controls = sobol::sobol(n_traj * t_horizon, 2, &lower, &upper)?;
    let mut z_rows = Vec::with_capacity(n);
    let mut y_rows = Vec::with_capacity(n);
    'outer: for traj in 0..n_traj {
        let mut x = sample_gaussian_diag(&noise.x0_mean, &noise.x0_cov_diag, rng)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect::<Vec<_>>();
        for t in 0..t_horizon {
            let u = controls[traj * t_horizon + t].clone();
            let x_next = plant_transition(&x, &u, SAMPLING_TIME_H, p, noise, rng)?;
            let y = measure(&x_next, noise, rng);
            let mut z_row = x.clone();
            z_row.extend_from_slice(&u);
            z_rows.push(z_row);
            y_rows.push(y);
            if z_rows.len() == n {
                break 'outer;
            }
            x = x_next;
        }
    }
    Ok((Matrix::from_rows(&z_rows), Matrix::from_rows(&y_rows)))
}
