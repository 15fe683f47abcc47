//! Multi-output GP state-space model: one independent GP per state
//! dimension over shared inputs, additive disturbance covariance,
//! normalization, and exact closed-loop trajectory sampling.

use crate::gp::{fit_hyperparameters, FitReport, GPModel, GPModelData, GpError};
use crate::linalg::Matrix;
use crate::rng::{sample_gaussian_diag, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StateSpaceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("fit failed for output {output}: {source}")]
    FitFailed { output: usize, source: GpError },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("control policy failed at time {time}: {message}")]
    PolicyFailure { time: usize, message: String },
}

/// Per-dimension zero-mean unit-variance scaler. Zero-variance dimensions
/// keep std = 1 so the transform stays invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(data: &Matrix) -> Self {
        let n = data.nrows() as f64;
        let d = data.ncols();
        let mut mean = vec![0.0; d];
        for i in 0..data.nrows() {
            for j in 0..d {
                mean[j] += data[(i, j)] / n;
            }
        }
        let mut std = vec![0.0; d];
        for i in 0..data.nrows() {
            for j in 0..d {
                let r = data[(i, j)] - mean[j];
                std[j] += r * r / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
            if *s <= 1e-12 {
                *s = 1.0;
            }
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| (v - self.mean[j]) / self.std[j]).collect()
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, &v)| v * self.std[j] + self.mean[j]).collect()
    }
}

/// One realized closed-loop state/control sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    /// (T+1) x n_x states in physical units.
    pub states: Vec<Vec<f64>>,
    /// T x n_u controls.
    pub controls: Vec<Vec<f64>>,
    pub sample_id: u64,
}

/// n_x independent GPs over shared normalized inputs plus a diagonal
/// disturbance covariance in physical units.
#[derive(Debug, Clone)]
pub struct GPStateSpace {
    gps: Vec<GPModel>,
    sigma_omega: Vec<f64>,
    z_scaler: Scaler,
    y_scaler: Scaler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GPStateSpaceData {
    pub gps: Vec<GPModelData>,
    pub sigma_omega: Vec<f64>,
    pub z_scaler: Scaler,
    pub y_scaler: Scaler,
    pub fit_reports: Option<Vec<FitReport>>,
}

impl GPStateSpace {
    /// Fit one GP per output column on normalized data. Scalers are
    /// computed from the raw data; sigma_omega stays in physical units.
    pub fn fit(
        z_raw: &Matrix,
        y_raw: &Matrix,
        sigma_omega: Vec<f64>,
        restarts: usize,
        rng: &mut RngStream,
    ) -> Result<(Self, Vec<FitReport>), StateSpaceError> {
        assert!(z_raw.nrows() >= 5, "need at least 5 data points");
        assert_eq!(z_raw.nrows(), y_raw.nrows());
        assert_eq!(y_raw.ncols(), sigma_omega.len());
        let z_scaler = Scaler::fit(z_raw);
        let y_scaler = Scaler::fit(y_raw);

        let n = z_raw.nrows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| z_scaler.transform(z_raw.row(i))).collect();
        let z_norm = Matrix::from_rows(&rows);

        let mut gps = Vec::with_capacity(y_raw.ncols());
        let mut reports = Vec::with_capacity(y_raw.ncols());
        for out in 0..y_raw.ncols() {
            let y: Vec<f64> =
                (0..n).map(|i| (y_raw[(i, out)] - y_scaler.mean[out]) / y_scaler.std[out]).collect();
            let mut fit_rng = rng.substream(rng.stream_id().wrapping_add(1000 + out as u64));
            let (psi, report) = fit_hyperparameters(&z_norm, &y, restarts, &mut fit_rng)
                .map_err(|source| StateSpaceError::FitFailed { output: out, source })?;
            let gp = GPModel::new(z_norm.clone(), y, psi, vec![true; n])
                .map_err(|source| StateSpaceError::FitFailed { output: out, source })?;
            gps.push(gp);
            reports.push(report);
        }
        Ok((GPStateSpace { gps, sigma_omega, z_scaler, y_scaler }, reports))
    }

    pub fn from_parts(
        gps: Vec<GPModel>,
        sigma_omega: Vec<f64>,
        z_scaler: Scaler,
        y_scaler: Scaler,
    ) -> Self {
        assert_eq!(gps.len(), sigma_omega.len());
        GPStateSpace { gps, sigma_omega, z_scaler, y_scaler }
    }

    pub fn to_data(&self) -> GPStateSpaceData {
        GPStateSpaceData {
            gps: self.gps.iter().map(|g| g.to_data()).collect(),
            sigma_omega: self.sigma_omega.clone(),
            z_scaler: self.z_scaler.clone(),
            y_scaler: self.y_scaler.clone(),
            fit_reports: None,
        }
    }

    pub fn from_data(data: GPStateSpaceData) -> Result<Self, StateSpaceError> {
        let gps = data
            .gps
            .into_iter()
            .map(GPModel::from_data)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GPStateSpace { gps, sigma_omega: data.sigma_omega, z_scaler: data.z_scaler, y_scaler: data.y_scaler })
    }

    pub fn n_states(&self) -> usize {
        self.gps.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.z_scaler.mean.len()
    }

    pub fn n_controls(&self) -> usize {
        self.n_inputs() - self.n_states()
    }

    pub fn training_len(&self) -> usize {
        self.gps[0].len()
    }

    pub fn gps(&self) -> &[GPModel] {
        &self.gps
    }

    pub fn sigma_omega(&self) -> &[f64] {
        &self.sigma_omega
    }

    pub fn z_scaler(&self) -> &Scaler {
        &self.z_scaler
    }

    pub fn y_scaler(&self) -> &Scaler {
        &self.y_scaler
    }

    fn join_z(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, StateSpaceError> {
        if x.len() != self.n_states() {
            return Err(StateSpaceError::DimensionMismatch {
                expected: self.n_states(),
                got: x.len(),
            });
        }
        if x.len() + u.len() != self.n_inputs() {
            return Err(StateSpaceError::DimensionMismatch {
                expected: self.n_inputs(),
                got: x.len() + u.len(),
            });
        }
        let mut z = Vec::with_capacity(self.n_inputs());
        z.extend_from_slice(x);
        z.extend_from_slice(u);
        Ok(self.z_scaler.transform(&z))
    }

    /// Predictive mean and diagonal variance in physical units, disturbance
    /// covariance included.
    pub fn predict(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>), StateSpaceError> {
        let z = self.join_z(x, u)?;
        let mut mean = Vec::with_capacity(self.n_states());
        let mut var = Vec::with_capacity(self.n_states());
        for (i, gp) in self.gps.iter().enumerate() {
            let (m, v) = gp.posterior(&z)?;
            mean.push(m * self.y_scaler.std[i] + self.y_scaler.mean[i]);
            var.push(v * self.y_scaler.std[i] * self.y_scaler.std[i] + self.sigma_omega[i]);
        }
        Ok((mean, var))
    }

    /// Mean-only prediction; the hot path for shooting rollouts.
    pub fn predict_mean(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, StateSpaceError> {
        let z = self.join_z(x, u)?;
        let mut mean = Vec::with_capacity(self.n_states());
        for (i, gp) in self.gps.iter().enumerate() {
            mean.push(gp.posterior_mean(&z)? * self.y_scaler.std[i] + self.y_scaler.mean[i]);
        }
        Ok(mean)
    }

    /// Trace of the one-step predictive covariance in normalized units,
    /// disturbance included; this is what the variance penalty weights.
    pub fn normalized_variance_trace(&self, x: &[f64], u: &[f64]) -> Result<f64, StateSpaceError> {
        let z = self.join_z(x, u)?;
        let mut tr = 0.0;
        for (i, gp) in self.gps.iter().enumerate() {
            let (_, v) = gp.posterior(&z)?;
            tr += v + self.sigma_omega[i] / (self.y_scaler.std[i] * self.y_scaler.std[i]);
        }
        Ok(tr)
    }

    /// Condition every output GP on the same input with its own target.
    pub fn condition_all(
        &self,
        x: &[f64],
        u: &[f64],
        x_next: &[f64],
        noiseless: bool,
    ) -> Result<Self, StateSpaceError> {
        let z = self.join_z(x, u)?;
        if x_next.len() != self.n_states() {
            return Err(StateSpaceError::DimensionMismatch {
                expected: self.n_states(),
                got: x_next.len(),
            });
        }
        let mut gps = Vec::with_capacity(self.gps.len());
        for (i, gp) in self.gps.iter().enumerate() {
            let y = (x_next[i] - self.y_scaler.mean[i]) / self.y_scaler.std[i];
            match gp.condition(&z, y, noiseless) {
                Ok(updated) => gps.push(updated),
                // a singular update means the GP already interpolates this
                // input exactly; the observation carries no information
                Err(GpError::SingularUpdate(_)) => gps.push(gp.clone()),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(GPStateSpace {
            gps,
            sigma_omega: self.sigma_omega.clone(),
            z_scaler: self.z_scaler.clone(),
            y_scaler: self.y_scaler.clone(),
        })
    }
}

/// Feedback policy used during sampling: maps (state, time) to a control.
pub type Policy<'a> = dyn FnMut(&[f64], usize) -> Result<Vec<f64>, String> + 'a;

/// Exact GP trajectory sampling: draw the initial state, then repeatedly
/// draw the next state from the predictive distribution and condition the
/// working model on the draw as a noiseless observation. Returns the
/// trajectory and the final conditioned working copy.
pub fn sample_trajectory(
    gpss: &GPStateSpace,
    policy: &mut Policy,
    x0_mean: &[f64],
    x0_cov_diag: &[f64],
    horizon: usize,
    rng: &mut RngStream,
) -> Result<(Trajectory, GPStateSpace), StateSpaceError> {
    let mut working = gpss.clone();
    let x0 = sample_gaussian_diag(x0_mean, x0_cov_diag, rng);
    let mut states = vec![x0];
    let mut controls = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let x_prev = states[t - 1].clone();
        let u = policy(&x_prev, t - 1)
            .map_err(|message| StateSpaceError::PolicyFailure { time: t - 1, message })?;
        let (mean, var) = working.predict(&x_prev, &u)?;
        let x_t = sample_gaussian_diag(&mean, &var, rng);
        working = working.condition_all(&x_prev, &u, &x_t, true)?;
        states.push(x_t);
        controls.push(u);
    }
    Ok((Trajectory { states, controls, sample_id: rng.stream_id() }, working))
}

/// Nominal trajectory: every draw replaced by its mean. No conditioning is
/// needed since conditioning the mean function on its own mean is a no-op.
pub fn nominal_trajectory(
    gpss: &GPStateSpace,
    policy: &mut Policy,
    x0_mean: &[f64],
    horizon: usize,
) -> Result<Trajectory, StateSpaceError> {
    let mut states = vec![x0_mean.to_vec()];
    let mut controls = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let x_prev = states[t - 1].clone();
        let u = policy(&x_prev, t - 1)
            .map_err(|message| StateSpaceError::PolicyFailure { time: t - 1, message })?;
        let mean = gpss.predict_mean(&x_prev, &u)?;
        states.push(mean);
        controls.push(u);
    }
    Ok(Trajectory { states, controls, sample_id: 0 })
}

/// Write a batch of trajectories as CSV: sample_id, t, x_1.., u_1..
/// Controls are blank on the terminal row.
pub fn trajectories_to_csv<W: std::io::Write>(
    trajectories: &[Trajectory],
    n_x: usize,
    n_u: usize,
    w: W,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["sample_id".to_string(), "t".to_string()];
    header.extend((1..=n_x).map(|i| format!("x_{i}")));
    header.extend((1..=n_u).map(|i| format!("u_{i}")));
    wtr.write_record(&header)?;
    for traj in trajectories {
        for (t, x) in traj.states.iter().enumerate() {
            let mut rec = vec![traj.sample_id.to_string(), t.to_string()];
            rec.extend(x.iter().map(|v| format!("{v}")));
            if t < traj.controls.len() {
                rec.extend(traj.controls[t].iter().map(|v| format!("{v}")));
            } else {
                rec.extend(std::iter::repeat(String::new()).take(n_u));
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
