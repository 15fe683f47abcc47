//! End-to-end experiment orchestration: dataset generation, GP fitting,
//! back-off computation against the GP plant distribution, closed-loop
//! evaluation against the simulated reactor, and the CSV/JSON artifacts
//! tying the stages together.

use crate::backoff::{
    joint_satisfaction_stat, run_backoff_iterations, BackoffConfig, BackoffError,
    BackoffRunReport, BackoffTable, ConstraintSampler,
};
use crate::linalg::Matrix;
use crate::nmpc::{ConstraintSet, NmpcError, OCPSpec, PolicyState};
use crate::plant::{
    self, BioreactorParams, NoiseSpec, PlantError, SAMPLING_TIME_H,
};
use crate::rng::{sample_gaussian_diag, RngStream};
use crate::gp::FitReport;
use crate::statespace::{
    nominal_trajectory, sample_trajectory, GPStateSpace, GPStateSpaceData, StateSpaceError,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error(transparent)]
    Backoff(#[from] BackoffError),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error("config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// 1 = Sobol design over the full operating box, 2 = open-loop
    /// trajectories with Sobol controls
    pub dataset_type: u8,
    pub n: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { dataset_type: 1, n: 60, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub restarts: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { restarts: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChanceConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub s: usize,
    pub n_b: usize,
    pub gamma_upper: f64,
    pub fresh_samples: bool,
}

impl Default for ChanceConfig {
    fn default() -> Self {
        ChanceConfig {
            epsilon: 0.1,
            alpha: 0.01,
            delta: 0.1,
            s: 1000,
            n_b: 16,
            gamma_upper: 4.0,
            fresh_samples: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct VariantConfig {
    pub learning: bool,
    pub state_dependent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_closed_loop_runs: usize,
    pub nominal_comparison: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_closed_loop_runs: 100, nominal_comparison: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub gp: GpConfig,
    pub chance: ChanceConfig,
    pub variant: VariantConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            gp: GpConfig::default(),
            chance: ChanceConfig::default(),
            variant: VariantConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `desk` shrinks the Monte-Carlo budget to CI scale; `paper` restores
    /// the full-scale study settings.
    pub fn apply_profile(&mut self, profile: &str) -> Result<(), PipelineError> {
        match profile {
            "desk" => {
                self.chance.s = 200;
                self.chance.n_b = 8;
                self.eval.n_closed_loop_runs = 50;
            }
            "paper" => {
                self.chance.s = 1000;
                self.chance.n_b = 16;
                self.eval.n_closed_loop_runs = 100;
            }
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown profile '{other}' (expected desk or paper)"
                )))
            }
        }
        Ok(())
    }

    fn backoff_config(&self) -> BackoffConfig {
        BackoffConfig {
            epsilon: self.chance.epsilon,
            alpha: self.chance.alpha,
            delta: self.chance.delta,
            s: self.chance.s,
            n_b: self.chance.n_b,
            gamma_upper: self.chance.gamma_upper,
            fresh_samples: self.chance.fresh_samples,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dataset_type: u8,
    pub n: usize,
    pub seed: u64,
    pub n_source_trajectories: Option<usize>,
}

/// Dataset CSV: z_1..z_k, y_1..y_m, one row per training point.
pub fn dataset_to_csv<W: Write>(z: &Matrix, y: &Matrix, w: W) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=z.ncols()).map(|i| format!("z_{i}")).collect();
    header.extend((1..=y.ncols()).map(|i| format!("y_{i}")));
    wtr.write_record(&header)?;
    for i in 0..z.nrows() {
        let mut rec: Vec<String> = z.row(i).iter().map(|v| format!("{v}")).collect();
        rec.extend(y.row(i).iter().map(|v| format!("{v}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn dataset_from_csv<R: std::io::Read>(r: R) -> Result<(Matrix, Matrix), PipelineError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let n_z = header.iter().filter(|h| h.starts_with("z_")).count();
    let n_y = header.iter().filter(|h| h.starts_with("y_")).count();
    if n_z == 0 || n_y == 0 || n_z + n_y != header.len() {
        return Err(PipelineError::Config(format!(
            "dataset header must be z_1..z_k, y_1..y_m, got {header:?}"
        )));
    }
    let mut z_rows = Vec::new();
    let mut y_rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let vals: Vec<f64> = record
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| PipelineError::Config(format!("bad dataset value: {e}")))?;
        z_rows.push(vals[..n_z].to_vec());
        y_rows.push(vals[n_z..].to_vec());
    }
    Ok((Matrix::from_rows(&z_rows), Matrix::from_rows(&y_rows)))
}

/// Generate the configured dataset and persist it as CSV plus a metadata
/// sidecar. Reruns with the same seed produce identical bytes.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<(Matrix, Matrix), PipelineError> {
    let p = BioreactorParams::default();
    let noise = NoiseSpec::default();
    let mut rng = RngStream::new(config.dataset.seed, 0);
    let t_horizon = 12;
    let (z, y, n_traj) = match config.dataset.dataset_type {
        1 => {
            let (z, y) = plant::generate_dataset_type1(config.dataset.n, &p, &noise, &mut rng)?;
            (z, y, None)
        }
        2 => {
            let (z, y) =
                plant::generate_dataset_type2(config.dataset.n, t_horizon, &p, &noise, &mut rng)?;
            (z, y, Some(config.dataset.n.div_ceil(t_horizon)))
        }
        other => {
            return Err(PipelineError::Config(format!("dataset type must be 1 or 2, got {other}")))
        }
    };
    fs::create_dir_all(&config.output_dir)?;
    let mut file = fs::File::create(config.output_dir.join("dataset.csv"))?;
    dataset_to_csv(&z, &y, &mut file)?;
    let meta = DatasetMeta {
        dataset_type: config.dataset.dataset_type,
        n: config.dataset.n,
        seed: config.dataset.seed,
        n_source_trajectories: n_traj,
    };
    fs::write(
        config.output_dir.join("dataset_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok((z, y))
}

/// Fit the state-space GP on a persisted dataset and write the model JSON.
pub fn cmd_fit(
    config: &ExperimentConfig,
) -> Result<(GPStateSpace, Vec<FitReport>), PipelineError> {
    let file = fs::File::open(config.output_dir.join("dataset.csv"))?;
    let (z, y) = dataset_from_csv(file)?;
    let gpss = fit_model(config, &z, &y)?;
    let mut data = gpss.0.to_data();
    data.fit_reports = Some(gpss.1.clone());
    fs::write(config.output_dir.join("model.json"), serde_json::to_string_pretty(&data)?)?;
    Ok(gpss)
}

pub fn fit_model(
    config: &ExperimentConfig,
    z: &Matrix,
    y: &Matrix,
) -> Result<(GPStateSpace, Vec<FitReport>), PipelineError> {
    let noise = NoiseSpec::default();
    let mut rng = RngStream::new(config.dataset.seed, 1);
    Ok(GPStateSpace::fit(z, y, noise.sigma_omega_diag, config.gp.restarts, &mut rng)?)
}

pub fn load_model(config: &ExperimentConfig) -> Result<GPStateSpace, PipelineError> {
    let text = fs::read_to_string(config.output_dir.join("model.json"))?;
    let data: GPStateSpaceData = serde_json::from_str(&text)?;
    Ok(GPStateSpace::from_data(data)?)
}

/// Raw constraint values of a state trajectory: (T+1) x n_g, terminal-only
/// constraints zero before the final step.
pub fn constraint_matrix(cs: &ConstraintSet, states: &[Vec<f64>], t_horizon: usize) -> Matrix {
    let mut g = Matrix::zeros(states.len(), cs.len());
    for (t, x) in states.iter().enumerate() {
        for j in 0..cs.len() {
            g[(t, j)] = cs.eval(j, x, t, t_horizon);
        }
    }
    g
}

/// Monte-Carlo constraint sampler backing Algorithm 2: every sample is one
/// exact realization of the GP plant distribution under the NMPC policy
/// with the candidate back-offs, started from a fresh copy of the original
/// dataset.
///
/// Without learning the prediction model is fixed, so the controls of a
/// sample depend only on its initial condition: the optimal control problem
/// is solved once from the drawn initial state and the resulting sequence is
/// applied as planned. With learning the controller re-solves each step on
/// the model conditioned along the sample's own realization.
pub struct NmpcSampler {
    pub gpss: GPStateSpace,
    pub spec: OCPSpec,
    pub noise: NoiseSpec,
    pub learning: bool,
    pub seed: u64,
}

impl NmpcSampler {
    pub fn new(
        gpss: GPStateSpace,
        spec: OCPSpec,
        noise: NoiseSpec,
        learning: bool,
        seed: u64,
    ) -> Self {
        NmpcSampler { gpss, spec, noise, learning, seed }
    }

    /// Policy used inside the MC simulations and for the nominal trajectory.
    fn calibration_policy<'a>(
        &'a self,
        table: &BackoffTable,
    ) -> Box<dyn FnMut(&[f64], usize) -> Result<Vec<f64>, String> + 'a> {
        if self.learning {
            let mut policy_state =
                PolicyState::new(self.gpss.clone(), self.spec.clone(), table.clone(), true);
            Box::new(move |x: &[f64], t: usize| policy_state.kappa(x, t).map_err(|e| e.to_string()))
        } else {
            let table = table.clone();
            let mut plan: Option<Vec<Vec<f64>>> = None;
            Box::new(move |x: &[f64], t: usize| {
                if plan.is_none() {
                    let sol = crate::nmpc::solve_ocp(&self.gpss, &self.spec, &table, x, t, None, None)
                        .map_err(|e| e.to_string())?;
                    plan = Some(sol.u);
                }
                Ok(plan.as_ref().unwrap()[t].clone())
            })
        }
    }
}

impl ConstraintSampler for NmpcSampler {
    fn sample(&self, table: &BackoffTable, stream: u64) -> Result<Matrix, String> {
        let mut rng = RngStream::new(self.seed, stream);
        let mut policy = self.calibration_policy(table);
        let (traj, _) = sample_trajectory(
            &self.gpss,
            &mut policy,
            &self.noise.x0_mean,
            &self.noise.x0_cov_diag,
            self.spec.t_horizon,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        Ok(constraint_matrix(&self.spec.constraints, &traj.states, self.spec.t_horizon))
    }

    fn nominal(&self, table: &BackoffTable) -> Result<Matrix, String> {
        let mut policy = self.calibration_policy(table);
        let traj = nominal_trajectory(
            &self.gpss,
            &mut policy,
            &self.noise.x0_mean,
            self.spec.t_horizon,
        )
        .map_err(|e| e.to_string())?;
        Ok(constraint_matrix(&self.spec.constraints, &traj.states, self.spec.t_horizon))
    }
}

/// Back-off report JSON: chance-constraint settings alongside the outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackoffArtifact {
    pub gamma: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub s: usize,
    pub n_b: usize,
    pub beta_hat: f64,
    pub beta_lb: f64,
    pub converged: bool,
    pub no_sign_change: bool,
    pub report: BackoffRunReport,
}

/// Run Algorithm 2 with the NMPC sampler and persist the back-off table
/// CSV and run-report JSON.
pub fn cmd_backoff(
    config: &ExperimentConfig,
    gpss: &GPStateSpace,
) -> Result<BackoffRunReport, PipelineError> {
    let spec = OCPSpec::case_study(config.variant.state_dependent);
    let sampler = NmpcSampler::new(
        gpss.clone(),
        spec.clone(),
        NoiseSpec::default(),
        config.variant.learning,
        config.dataset.seed,
    );
    let mut rng = RngStream::new(config.dataset.seed, 2);
    let report = run_backoff_iterations(
        &config.backoff_config(),
        &sampler,
        spec.t_horizon,
        spec.constraints.len(),
        &mut rng,
    )?;
    fs::create_dir_all(&config.output_dir)?;
    let mut file = fs::File::create(config.output_dir.join("backoff.csv"))?;
    report.table.to_csv(&mut file)?;
    let artifact = BackoffArtifact {
        gamma: report.table.gamma,
        epsilon: config.chance.epsilon,
        alpha: config.chance.alpha,
        delta: config.chance.delta,
        s: config.chance.s,
        n_b: config.chance.n_b,
        beta_hat: report.beta_hat,
        beta_lb: report.beta_lb,
        converged: report.converged,
        no_sign_change: report.no_sign_change,
        report: report.clone(),
    };
    fs::write(
        config.output_dir.join("backoff_report.json"),
        serde_json::to_string_pretty(&artifact)?,
    )?;
    Ok(report)
}

pub fn load_backoffs(config: &ExperimentConfig) -> Result<BackoffArtifact, PipelineError> {
    let text = fs::read_to_string(config.output_dir.join("backoff_report.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Episode {
    pub run_id: u64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub constraints: Matrix,
    /// control-move penalty minus terminal product concentration
    pub objective: f64,
    pub violated: bool,
    pub failed: bool,
}

/// One closed-loop episode of the policy against the true plant.
pub fn run_episode(
    gpss: &GPStateSpace,
    spec: &OCPSpec,
    table: &BackoffTable,
    learning: bool,
    run_id: u64,
    seed: u64,
) -> Result<Episode, PipelineError> {
    let p = BioreactorParams::default();
    let noise = NoiseSpec::default();
    let mut rng = RngStream::new(seed, 100_000 + run_id);
    let x0: Vec<f64> = sample_gaussian_diag(&noise.x0_mean, &noise.x0_cov_diag, &mut rng)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let mut policy = PolicyState::new(gpss.clone(), spec.clone(), table.clone(), learning);
    let mut states = vec![x0];
    let mut controls = Vec::with_capacity(spec.t_horizon);
    let mut failed = false;
    for t in 0..spec.t_horizon {
        let x = states[t].clone();
        let u = match policy.kappa(&x, t) {
            Ok(u) => u,
            Err(_) => {
                failed = true;
                break;
            }
        };
        let x_next = plant::plant_transition(&x, &u, SAMPLING_TIME_H, &p, &noise, &mut rng)?;
        controls.push(u);
        states.push(x_next);
    }
    let constraints = constraint_matrix(&spec.constraints, &states, spec.t_horizon);
    let violated = failed || joint_satisfaction_stat(&constraints) > 0.0;
    let mut objective = -states.last().map(|x| x[2]).unwrap_or(0.0);
    for w in controls.windows(2) {
        for (i, r) in spec.r_diag.iter().enumerate() {
            let d = w[1][i] - w[0][i];
            objective += r * d * d;
        }
    }
    Ok(Episode { run_id, states, controls, constraints, objective, violated, failed })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: String,
    pub n_runs: usize,
    pub n_failed: usize,
    pub violation_fraction: f64,
    pub mean_objective: f64,
    pub std_objective: f64,
}

pub fn summarize_episodes(variant: &str, episodes: &[Episode]) -> EvalSummary {
    let n = episodes.len();
    let n_failed = episodes.iter().filter(|e| e.failed).count();
    let violations = episodes.iter().filter(|e| e.violated).count();
    let objectives: Vec<f64> =
        episodes.iter().filter(|e| !e.failed).map(|e| e.objective).collect();
    let mean = if objectives.is_empty() {
        f64::NAN
    } else {
        objectives.iter().sum::<f64>() / objectives.len() as f64
    };
    let std = if objectives.len() < 2 {
        0.0
    } else {
        (objectives.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (objectives.len() - 1) as f64)
            .sqrt()
    };
    EvalSummary {
        variant: variant.to_string(),
        n_runs: n,
        n_failed,
        violation_fraction: violations as f64 / n as f64,
        mean_objective: mean,
        std_objective: std,
    }
}

/// Episode trajectories CSV: run_id, t, x_*, u_*, g_*; controls blank on
/// the terminal row.
pub fn episodes_to_csv<W: Write>(
    episodes: &[Episode],
    n_x: usize,
    n_u: usize,
    n_g: usize,
    w: W,
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["run_id".to_string(), "t".to_string()];
    header.extend((1..=n_x).map(|i| format!("x_{i}")));
    header.extend((1..=n_u).map(|i| format!("u_{i}")));
    header.extend((1..=n_g).map(|i| format!("g_{i}")));
    wtr.write_record(&header)?;
    for ep in episodes {
        for (t, x) in ep.states.iter().enumerate() {
            let mut rec = vec![ep.run_id.to_string(), t.to_string()];
            rec.extend(x.iter().map(|v| format!("{v}")));
            if t < ep.controls.len() {
                rec.extend(ep.controls[t].iter().map(|v| format!("{v}")));
            } else {
                rec.extend(std::iter::repeat(String::new()).take(n_u));
            }
            rec.extend((0..n_g).map(|j| format!("{}", ep.constraints[(t, j)])));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub struct EvalOutcome {
    pub backoff: Vec<Episode>,
    pub nominal: Option<Vec<Episode>>,
    pub summaries: Vec<EvalSummary>,
}

/// Closed-loop evaluation against the plant: the back-off controller and,
/// when configured, the same controller with back-offs zeroed.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    gpss: &GPStateSpace,
    table: &BackoffTable,
    variant: &str,
) -> Result<EvalOutcome, PipelineError> {
    let spec = OCPSpec::case_study(config.variant.state_dependent);
    let run = |table: &BackoffTable, tag: u64| -> Result<Vec<Episode>, PipelineError> {
        (0..config.eval.n_closed_loop_runs as u64)
            .map(|r| {
                run_episode(
                    gpss,
                    &spec,
                    table,
                    config.variant.learning,
                    tag * 1_000_000 + r,
                    config.dataset.seed,
                )
            })
            .collect()
    };
    let backoff_eps = run(table, 0)?;
    let nominal_eps = if config.eval.nominal_comparison {
        let zero = BackoffTable::zeros(table.t_horizon(), table.n_g());
        Some(run(&zero, 1)?)
    } else {
        None
    };

    fs::create_dir_all(&config.output_dir)?;
    let n_x = gpss.n_states();
    let n_u = gpss.n_controls();
    let n_g = spec.constraints.len();
    let mut file = fs::File::create(config.output_dir.join("trajectories.csv"))?;
    episodes_to_csv(&backoff_eps, n_x, n_u, n_g, &mut file)?;
    let mut summaries = vec![summarize_episodes(variant, &backoff_eps)];
    if let Some(eps) = &nominal_eps {
        let mut file = fs::File::create(config.output_dir.join("trajectories_nominal.csv"))?;
        episodes_to_csv(eps, n_x, n_u, n_g, &mut file)?;
        summaries.push(summarize_episodes(&format!("{variant}-nominal"), eps));
    }
    Ok(EvalOutcome { backoff: backoff_eps, nominal: nominal_eps, summaries })
}

/// Time-averaged back-offs for the nitrate constraints (g1, g3) and the
/// product-ratio constraint (g2), the two quantities the study tabulates.
pub fn mean_backoffs(table: &BackoffTable) -> (f64, f64) {
    let t_rows = table.b.nrows();
    let mut g1g3 = 0.0;
    let mut g2 = 0.0;
    let mut n13 = 0usize;
    let mut n2 = 0usize;
    for t in 1..t_rows {
        for j in 0..table.n_g() {
            if j == 1 {
                g2 += table.b[(t, j)];
                n2 += 1;
            } else {
                g1g3 += table.b[(t, j)];
                n13 += 1;
            }
        }
    }
    (g1g3 / n13.max(1) as f64, g2 / n2.max(1) as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub beta_hat: f64,
    pub beta_lb: f64,
    pub mean_backoff_g1g3: f64,
    pub mean_backoff_g2: f64,
    pub violation_fraction: f64,
    pub mean_objective: f64,
    pub std_objective: f64,
}

pub fn summary_to_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "variant",
        "beta_hat",
        "beta_lb",
        "mean_backoff_g1g3",
        "mean_backoff_g2",
        "violation_fraction",
        "mean_objective",
        "std_objective",
    ])?;
    for row in rows {
        wtr.write_record(&[
            row.variant.clone(),
            format!("{}", row.beta_hat),
            format!("{}", row.beta_lb),
            format!("{}", row.mean_backoff_g1g3),
            format!("{}", row.mean_backoff_g2),
            format!("{}", row.violation_fraction),
            format!("{}", row.mean_objective),
            format!("{}", row.std_objective),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Configuration for one of the named study variants.
pub fn variant_config(name: &str) -> Result<ExperimentConfig, PipelineError> {
    let mut config = ExperimentConfig::default();
    match name {
        "gp50" => config.dataset.n = 50,
        "gp60" => config.dataset.n = 60,
        "gp100" => config.dataset.n = 100,
        "gp50-learning" => {
            config.dataset.n = 50;
            config.variant.learning = true;
        }
        "gp50-sd" => {
            config.dataset.n = 50;
            config.dataset.dataset_type = 2;
            config.variant.state_dependent = true;
        }
        "gp50-nsd" => {
            config.dataset.n = 50;
            config.dataset.dataset_type = 2;
        }
        other => {
            return Err(PipelineError::Config(format!(
                "unknown variant '{other}' (expected gp50, gp60, gp100, gp50-learning, gp50-sd, gp50-nsd)"
            )))
        }
    }
    Ok(config)
}

/// Full pipeline for a named variant: generate, fit, back-off, evaluate,
/// and append the comparison row to summary.csv.
pub fn cmd_reproduce(config: &ExperimentConfig, variant: &str) -> Result<SummaryRow, PipelineError> {
    cmd_generate(config)?;
    let (gpss, _) = cmd_fit(config)?;
    let report = cmd_backoff(config, &gpss)?;
    let outcome = cmd_evaluate(config, &gpss, &report.table, variant)?;
    let (b13, b2) = mean_backoffs(&report.table);
    let row = SummaryRow {
        variant: variant.to_string(),
        beta_hat: report.beta_hat,
        beta_lb: report.beta_lb,
        mean_backoff_g1g3: b13,
        mean_backoff_g2: b2,
        violation_fraction: outcome.summaries[0].violation_fraction,
        mean_objective: outcome.summaries[0].mean_objective,
        std_objective: outcome.summaries[0].std_objective,
    };
    let mut file = fs::File::create(config.output_dir.join("summary.csv"))?;
    summary_to_csv(std::slice::from_ref(&row), &mut file)?;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_match_study_setup() {
        let c = ExperimentConfig::default();
        assert_eq!(c.chance.epsilon, 0.1);
        assert_eq!(c.chance.alpha, 0.01);
        assert_eq!(c.chance.delta, 0.1);
        assert_eq!(c.chance.s, 1000);
        assert_eq!(c.chance.n_b, 16);
        assert!(!c.variant.learning);
        assert!(!c.variant.state_dependent);
    }

    #[test]
    fn profiles_rescale_budgets() {
        let mut c = ExperimentConfig::default();
        c.apply_profile("desk").unwrap();
        assert_eq!((c.chance.s, c.chance.n_b, c.eval.n_closed_loop_runs), (200, 8, 50));
        c.apply_profile("paper").unwrap();
        assert_eq!((c.chance.s, c.chance.n_b), (1000, 16));
        assert!(c.apply_profile("fast").is_err());
    }

    #[test]
    fn config_partial_json_uses_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": {"n": 75}, "variant": {"learning": true}}"#)
                .unwrap();
        assert_eq!(c.dataset.n, 75);
        assert_eq!(c.dataset.dataset_type, 1);
        assert!(c.variant.learning);
        assert_eq!(c.chance.s, 1000);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let y = Matrix::from_rows(&[vec![0.5, -0.5], vec![1.5, -1.5]]);
        let mut buf = Vec::new();
        dataset_to_csv(&z, &y, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("z_1,z_2,z_3,y_1,y_2\n"));
        let (z2, y2) = dataset_from_csv(buf.as_slice()).unwrap();
        assert_eq!(z.data(), z2.data());
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn generate_is_idempotent_per_seed() {
        let dir = tempdir();
        let mut config = ExperimentConfig::default();
        config.output_dir = dir.clone();
        config.dataset.n = 10;
        cmd_generate(&config).unwrap();
        let first = fs::read(dir.join("dataset.csv")).unwrap();
        cmd_generate(&config).unwrap();
        let second = fs::read(dir.join("dataset.csv")).unwrap();
        assert_eq!(first, second);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generate_type2_records_source_trajectories() {
        let dir = tempdir();
        let mut config = ExperimentConfig::default();
        config.output_dir = dir.clone();
        config.dataset.dataset_type = 2;
        config.dataset.n = 50;
        let (z, y) = cmd_generate(&config).unwrap();
        assert_eq!(z.nrows(), 50);
        assert_eq!(y.nrows(), 50);
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("dataset_meta.json")).unwrap())
                .unwrap();
        assert_eq!(meta.n_source_trajectories, Some(5));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn fit_round_trip_reproduces_predictions() {
        let dir = tempdir();
        let mut config = ExperimentConfig::default();
        config.output_dir = dir.clone();
        config.dataset.n = 20;
        config.gp.restarts = 2;
        cmd_generate(&config).unwrap();
        let (gpss, reports) = cmd_fit(&config).unwrap();
        assert_eq!(reports.len(), 3);
        let loaded = load_model(&config).unwrap();
        let x = [1.0, 150.0, 0.0];
        let u = [250.0, 10.0];
        let a = gpss.predict(&x, &u).unwrap();
        let b = loaded.predict(&x, &u).unwrap();
        for (p, q) in a.0.iter().zip(&b.0) {
            assert!((p - q).abs() <= 1e-10);
        }
        for (p, q) in a.1.iter().zip(&b.1) {
            assert!((p - q).abs() <= 1e-10);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn constraint_matrix_terminal_only_rows() {
        let cs = ConstraintSet::case_study();
        let states = vec![vec![1.0, 900.0, 0.0]; 4];
        let g = constraint_matrix(&cs, &states, 3);
        for t in 0..3 {
            assert_eq!(g[(t, 2)], 0.0, "g3 must be zero before the terminal step");
            assert_eq!(g[(t, 0)], 100.0);
        }
        assert_eq!(g[(3, 2)], 900.0 - 150.0);
    }

    #[test]
    fn summary_csv_schema() {
        let row = SummaryRow {
            variant: "gp60".into(),
            beta_hat: 0.91,
            beta_lb: 0.89,
            mean_backoff_g1g3: 34.2,
            mean_backoff_g2: 0.008,
            violation_fraction: 0.04,
            mean_objective: -2.5,
            std_objective: 0.1,
        };
        let mut buf = Vec::new();
        summary_to_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "variant,beta_hat,beta_lb,mean_backoff_g1g3,mean_backoff_g2,violation_fraction,mean_objective,std_objective\n"
        ));
        assert!(text.contains("gp60,0.91,0.89,34.2,0.008,0.04,-2.5,0.1"));
    }

    #[test]
    fn mean_backoffs_split_by_constraint() {
        let mut table = BackoffTable::zeros(2, 3);
        // rows t=1,2; g1 and g3 average to (10+30+20+40)/4, g2 to (1+2)/2
        table.b[(1, 0)] = 10.0;
        table.b[(2, 0)] = 20.0;
        table.b[(1, 1)] = 1.0;
        table.b[(2, 1)] = 2.0;
        table.b[(1, 2)] = 30.0;
        table.b[(2, 2)] = 40.0;
        let (g13, g2) = mean_backoffs(&table);
        assert_eq!(g13, 25.0);
        assert_eq!(g2, 1.5);
    }

    #[test]
    fn variant_configs_match_study_table() {
        assert_eq!(variant_config("gp100").unwrap().dataset.n, 100);
        assert!(variant_config("gp50-learning").unwrap().variant.learning);
        let sd = variant_config("gp50-sd").unwrap();
        assert!(sd.variant.state_dependent);
        assert_eq!(sd.dataset.dataset_type, 2);
        assert_eq!(variant_config("gp50-nsd").unwrap().dataset.dataset_type, 2);
        assert!(variant_config("gp42").is_err());
    }

    #[test]
    fn episode_objective_and_violation_flags() {
        let cs = ConstraintSet::case_study();
        let states = vec![vec![1.0, 700.0, 0.005], vec![2.0, 850.0, 0.01]];
        let g = constraint_matrix(&cs, &states, 1);
        assert!(joint_satisfaction_stat(&g) > 0.0, "g1 is violated at t=1");
    }

    fn tempdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "gpnmpc-pipeline-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}
