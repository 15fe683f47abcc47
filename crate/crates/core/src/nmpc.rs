//! Shooting NMPC over the GP mean model: tightened constraints enforced by
//! an augmented-Lagrangian outer loop around a projected-gradient inner
//! solver with finite-difference gradients, plus the feedback policy with
//! its learning / state-dependent variants.

use crate::backoff::BackoffTable;
use crate::statespace::{GPStateSpace, StateSpaceError};
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("rollout produced a non-finite state at step {0}")]
    NonFinite(usize),
    #[error("solver diverged: objective non-finite at every trial point")]
    SolverDiverged,
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
}

/// One inequality g(x) <= 0, evaluated on the state; terminal-only
/// constraints are identically zero before the final step.
#[derive(Clone)]
pub struct Constraint {
    pub name: String,
    /// characteristic magnitude dividing g before the solver sees it
    pub scale: f64,
    pub terminal_only: bool,
    pub g: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

#[derive(Clone)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    /// Nitrate path bound, product-to-biomass ratio bound, and the
    /// terminal nitrate bound.
    pub fn case_study() -> Self {
        ConstraintSet {
            constraints: vec![
                Constraint {
                    name: "g1".into(),
                    scale: 800.0,
                    terminal_only: false,
                    g: Arc::new(|x| x[1] - 800.0),
                },
                Constraint {
                    name: "g2".into(),
                    scale: 0.011 * 20.0,
                    terminal_only: false,
                    g: Arc::new(|x| x[2] - 0.011 * x[0]),
                },
                Constraint {
                    name: "g3".into(),
                    scale: 150.0,
                    terminal_only: true,
                    g: Arc::new(|x| x[1] - 150.0),
                },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Raw (unscaled) value of constraint j at time t.
    pub fn eval(&self, j: usize, x: &[f64], t: usize, t_horizon: usize) -> f64 {
        let c = &self.constraints[j];
        if c.terminal_only && t < t_horizon {
            0.0
        } else {
            (c.g)(x)
        }
    }

    pub fn eval_all(&self, x: &[f64], t: usize, t_horizon: usize) -> Vec<f64> {
        (0..self.len()).map(|j| self.eval(j, x, t, t_horizon)).collect()
    }
}

#[derive(Clone)]
pub struct OCPSpec {
    pub t_horizon: usize,
    /// diagonal of the control-move weight R
    pub r_diag: Vec<f64>,
    /// variance-penalty weights indexed by prediction offset (eta[0]
    /// applies to the first predicted step)
    pub eta: Vec<f64>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub constraints: ConstraintSet,
    pub terminal_cost: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    // augmented-Lagrangian solver parameters
    pub al_penalty0: f64,
    pub al_growth: f64,
    /// outer tolerance on the scaled constraint violation
    pub al_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// finite-difference step in scaled (unit-box) control coordinates
    pub fd_step: f64,
}

impl OCPSpec {
    pub fn case_study(state_dependent: bool) -> Self {
        let mut eta = vec![0.0; 12];
        if state_dependent {
            eta[0] = 15.0;
        }
        OCPSpec {
            t_horizon: 12,
            r_diag: vec![3.125e-8, 3.125e-6],
            eta,
            u_lower: vec![120.0, 0.0],
            u_upper: vec![400.0, 40.0],
            constraints: ConstraintSet::case_study(),
            terminal_cost: Arc::new(|x| -x[2]),
            al_penalty0: 10.0,
            al_growth: 5.0,
            al_tol: 1e-5,
            max_outer: 12,
            max_inner: 60,
            fd_step: 1e-4,
        }
    }

    pub fn n_u(&self) -> usize {
        self.u_lower.len()
    }
}

/// Mean rollout from the current state: states[0] is x_t, states[k] the
/// k-step-ahead prediction; var_traces[k-1] is the normalized predictive
/// variance trace at the input producing states[k].
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub var_traces: Vec<f64>,
}

pub fn rollout_mean(
    gpss: &GPStateSpace,
    x_t: &[f64],
    u_seq: &[Vec<f64>],
    need_variance: bool,
) -> Result<Rollout, NmpcError> {
    let mut states = Vec::with_capacity(u_seq.len() + 1);
    let mut var_traces = Vec::with_capacity(u_seq.len());
    states.push(x_t.to_vec());
    for (k, u) in u_seq.iter().enumerate() {
        let x = states.last().unwrap();
        if need_variance {
            var_traces.push(gpss.normalized_variance_trace(x, u)?);
        } else {
            var_traces.push(0.0);
        }
        let next = gpss.predict_mean(x, u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NmpcError::NonFinite(k));
        }
        states.push(next);
    }
    Ok(Rollout { states, var_traces })
}

/// Recompute a rollout from step k onward, reusing the base prefix.
fn rollout_tail(
    gpss: &GPStateSpace,
    base: &Rollout,
    k: usize,
    u_seq: &[Vec<f64>],
    need_variance: bool,
) -> Result<Rollout, NmpcError> {
    let mut states = base.states[..=k].to_vec();
    let mut var_traces = base.var_traces[..k].to_vec();
    for (step, u) in u_seq.iter().enumerate().skip(k) {
        let x = states.last().unwrap();
        if need_variance {
            var_traces.push(gpss.normalized_variance_trace(x, u)?);
        } else {
            var_traces.push(0.0);
        }
        let next = gpss.predict_mean(x, u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NmpcError::NonFinite(step));
        }
        states.push(next);
    }
    Ok(Rollout { states, var_traces })
}

/// Control-move cost, variance penalty, and terminal cost. prev_u = None
/// makes the first move free (t = 0 has no predecessor control).
pub fn ocp_objective(
    rollout: &Rollout,
    u_seq: &[Vec<f64>],
    prev_u: Option<&[f64]>,
    spec: &OCPSpec,
) -> f64 {
    let mut obj = 0.0;
    let mut last: Option<&[f64]> = prev_u;
    for u in u_seq {
        if let Some(p) = last {
            for (i, r) in spec.r_diag.iter().enumerate() {
                let d = u[i] - p[i];
                obj += r * d * d;
            }
        }
        last = Some(u);
    }
    for (k, tr) in rollout.var_traces.iter().enumerate() {
        let eta = spec.eta.get(k).copied().unwrap_or(0.0);
        obj += eta * tr;
    }
    obj + (spec.terminal_cost)(rollout.states.last().unwrap())
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveResult {
    pub u: Vec<Vec<f64>>,
    pub objective: f64,
    /// max over (j, k) of scaled tightened-constraint values, <= 0 feasible
    pub max_violation: f64,
    pub violated: bool,
    pub inner_iterations: usize,
    pub hit_iteration_cap: bool,
}

/// Scaled tightened constraints along a rollout that starts at absolute
/// time t: g_j(x_k)/scale_j + b_j^(k)/scale_j for k = t+1 ..= T.
fn scaled_constraints(
    rollout: &Rollout,
    t: usize,
    spec: &OCPSpec,
    backoffs: &BackoffTable,
    out: &mut Vec<f64>,
) {
    out.clear();
    for (step, x) in rollout.states.iter().enumerate().skip(1) {
        let k = t + step;
        for j in 0..spec.constraints.len() {
            let scale = spec.constraints.constraints[j].scale;
            let g = spec.constraints.eval(j, x, k, spec.t_horizon);
            out.push((g + backoffs.backoff(k, j)) / scale);
        }
    }
}

struct Transform<'a> {
    spec: &'a OCPSpec,
    steps: usize,
}

impl Transform<'_> {
    fn to_controls(&self, s: &[f64]) -> Vec<Vec<f64>> {
        let n_u = self.spec.n_u();
        (0..self.steps)
            .map(|k| {
                (0..n_u)
                    .map(|i| {
                        let lo = self.spec.u_lower[i];
                        let hi = self.spec.u_upper[i];
                        lo + s[k * n_u + i].clamp(0.0, 1.0) * (hi - lo)
                    })
                    .collect()
            })
            .collect()
    }

    fn from_controls(&self, u: &[Vec<f64>]) -> Vec<f64> {
        let n_u = self.spec.n_u();
        let mut s = Vec::with_capacity(self.steps * n_u);
        for u_k in u {
            for i in 0..n_u {
                let lo = self.spec.u_lower[i];
                let hi = self.spec.u_upper[i];
                s.push(((u_k[i] - lo) / (hi - lo)).clamp(0.0, 1.0));
            }
        }
        s
    }
}

/// Solve the OCP at time t by single shooting: decision variables are the
/// remaining controls mapped onto the unit box, constraints handled by an
/// augmented Lagrangian, inner minimization by projected gradient descent
/// with a Barzilai-Borwein step and Armijo backtracking. Returns the best
/// iterate by the merit objective + M * violation, so an infeasible
/// problem yields the least-infeasible control with the violation flagged.
pub fn solve_ocp(
    gpss: &GPStateSpace,
    spec: &OCPSpec,
    backoffs: &BackoffTable,
    x_t: &[f64],
    t: usize,
    prev_u: Option<&[f64]>,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<SolveResult, NmpcError> {
    assert!(t < spec.t_horizon);
    let steps = spec.t_horizon - t;
    let n_u = spec.n_u();
    let n_vars = steps * n_u;
    let n_con = steps * spec.constraints.len();
    let need_variance = spec.eta.iter().take(steps).any(|&e| e != 0.0);
    let tf = Transform { spec, steps };

    // objective and scaled constraints at a scaled point
    let eval = |s: &[f64], cons: &mut Vec<f64>| -> Result<f64, NmpcError> {
        let u = tf.to_controls(s);
        let rollout = rollout_mean(gpss, x_t, &u, need_variance)?;
        scaled_constraints(&rollout, t, spec, backoffs, cons);
        Ok(ocp_objective(&rollout, &u, prev_u, spec))
    };

    let mut s: Vec<f64> = match warm_start {
        Some(u) if u.len() == steps => tf.from_controls(u),
        _ => vec![0.5; n_vars],
    };

    let mut lambda = vec![0.0; n_con];
    let mut rho = spec.al_penalty0;
    let mut cons = Vec::with_capacity(n_con);

    // augmented-Lagrangian value for inequality constraints g <= 0
    let al_value = |f: f64, cons: &[f64], lambda: &[f64], rho: f64| -> f64 {
        let mut v = f;
        for (g, l) in cons.iter().zip(lambda) {
            let shifted = (g + l / rho).max(0.0);
            v += 0.5 * rho * shifted * shifted - 0.5 * l * l / rho;
        }
        v
    };

    const MERIT_M: f64 = 1e3;
    let merit = |f: f64, viol: f64| f + MERIT_M * viol.max(0.0);

    let f0 = eval(&s, &mut cons)?;
    if !f0.is_finite() {
        return Err(NmpcError::SolverDiverged);
    }
    let viol0 = cons.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best = SolveResult {
        u: tf.to_controls(&s),
        objective: f0,
        max_violation: viol0,
        violated: viol0 > spec.al_tol,
        inner_iterations: 0,
        hit_iteration_cap: false,
    };
    let mut best_merit = merit(f0, viol0);

    let mut total_inner = 0usize;
    let mut hit_cap = false;
    let mut prev_viol = f64::INFINITY;

    for _outer in 0..spec.max_outer {
        // inner projected-gradient minimization of the AL function
        let mut phi = {
            let f = eval(&s, &mut cons)?;
            al_value(f, &cons, &lambda, rho)
        };
        let mut grad = vec![0.0; n_vars];
        let mut prev_s: Option<Vec<f64>> = None;
        let mut prev_grad: Option<Vec<f64>> = None;
        let mut step = 0.1;
        let mut inner = 0;
        let mut stalled = 0u32;
        while inner < spec.max_inner {
            inner += 1;
            // forward finite differences off the current value; perturbing
            // the step-k control leaves states 0..k untouched, so only the
            // rollout tail from k is recomputed (the step flips backward at
            // the upper bound)
            let base_u = tf.to_controls(&s);
            let base_roll = rollout_mean(gpss, x_t, &base_u, need_variance)?;
            for i in 0..n_vars {
                let k = i / n_u;
                let orig = s[i];
                let h = if orig + spec.fd_step <= 1.0 { spec.fd_step } else { -spec.fd_step };
                let lo = spec.u_lower[i % n_u];
                let hi = spec.u_upper[i % n_u];
                let mut u = base_u.clone();
                u[k][i % n_u] = lo + (orig + h).clamp(0.0, 1.0) * (hi - lo);
                let roll = rollout_tail(gpss, &base_roll, k, &u, need_variance)?;
                scaled_constraints(&roll, t, spec, backoffs, &mut cons);
                let f_h = ocp_objective(&roll, &u, prev_u, spec);
                let phi_h = al_value(f_h, &cons, &lambda, rho);
                grad[i] = (phi_h - phi) / h;
            }
            // Barzilai-Borwein step length, safeguarded
            if let (Some(ps), Some(pg)) = (&prev_s, &prev_grad) {
                let mut sy = 0.0;
                let mut yy = 0.0;
                for i in 0..n_vars {
                    let ds = s[i] - ps[i];
                    let dg = grad[i] - pg[i];
                    sy += ds * dg;
                    yy += dg * dg;
                }
                if yy > 1e-30 && sy > 0.0 {
                    step = (sy / yy).clamp(1e-6, 10.0);
                }
            }
            prev_s = Some(s.clone());
            prev_grad = Some(grad.clone());

            // projected step with Armijo backtracking
            let mut accepted = false;
            let mut alpha = step;
            let phi_before = phi;
            for _ in 0..12 {
                let trial: Vec<f64> =
                    s.iter().zip(&grad).map(|(x, g)| (x - alpha * g).clamp(0.0, 1.0)).collect();
                let f_trial = eval(&trial, &mut cons)?;
                let phi_trial = al_value(f_trial, &cons, &lambda, rho);
                let decrease: f64 =
                    s.iter().zip(&trial).zip(&grad).map(|((x, tx), g)| g * (x - tx)).sum();
                if phi_trial.is_finite() && phi_trial <= phi - 1e-4 * decrease.max(0.0) - 1e-14 {
                    s = trial;
                    phi = phi_trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.25;
            }
            if !accepted {
                break; // stationary within line-search resolution
            }
            // projected-gradient optimality measure
            let pg_norm = s
                .iter()
                .zip(&grad)
                .map(|(x, g)| (x - (x - g).clamp(0.0, 1.0)).abs())
                .fold(0.0f64, f64::max);
            if pg_norm < 1e-7 {
                break;
            }
            // give up on vanishing progress: two consecutive iterations with
            // a relative decrease below 1e-10
            if phi_before - phi <= 1e-8 * (1.0 + phi_before.abs()) {
                stalled += 1;
                if stalled >= 2 {
                    break;
                }
            } else {
                stalled = 0;
            }
        }
        total_inner += inner;
        if inner == spec.max_inner {
            hit_cap = true;
        }

        let f = eval(&s, &mut cons)?;
        if !f.is_finite() {
            return Err(NmpcError::SolverDiverged);
        }
        let viol = cons.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = merit(f, viol);
        if m <= best_merit {
            best_merit = m;
            best = SolveResult {
                u: tf.to_controls(&s),
                objective: f,
                max_violation: viol,
                violated: viol > spec.al_tol,
                inner_iterations: total_inner,
                hit_iteration_cap: hit_cap,
            };
        }
        if viol <= spec.al_tol {
            break;
        }
        // multiplier update and penalty growth when progress stalls
        for (l, g) in lambda.iter_mut().zip(&cons) {
            *l = (*l + rho * g).max(0.0);
        }
        if viol > 0.25 * prev_viol {
            rho *= spec.al_growth;
        }
        prev_viol = viol;
    }

    best.inner_iterations = total_inner;
    best.hit_iteration_cap = hit_cap;
    Ok(best)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveDiagnostics {
    pub t: usize,
    pub inner_iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub wall_ms: f64,
}

/// Feedback-policy state: the (possibly online-conditioned) model, the
/// back-off table, warm-start memory, and the variant flags.
#[derive(Clone)]
pub struct PolicyState {
    gpss0: GPStateSpace,
    gpss: GPStateSpace,
    pub spec: OCPSpec,
    pub backoffs: BackoffTable,
    pub learning: bool,
    prev_u: Option<Vec<f64>>,
    warm: Option<Vec<Vec<f64>>>,
    last_xu: Option<(Vec<f64>, Vec<f64>)>,
    pub diagnostics: Vec<SolveDiagnostics>,
}

impl PolicyState {
    pub fn new(gpss: GPStateSpace, spec: OCPSpec, backoffs: BackoffTable, learning: bool) -> Self {
        PolicyState {
            gpss0: gpss.clone(),
            gpss,
            spec,
            backoffs,
            learning,
            prev_u: None,
            warm: None,
            last_xu: None,
            diagnostics: Vec::new(),
        }
    }

    /// Seed the first solve with a known-good control sequence (e.g. the
    /// nominal solution when many Monte-Carlo episodes share an initial
    /// condition distribution).
    pub fn with_warm_hint(mut self, hint: Option<Vec<Vec<f64>>>) -> Self {
        self.warm = hint;
        self
    }

    pub fn gpss(&self) -> &GPStateSpace {
        &self.gpss
    }

    /// Restore the initial dataset and clear episode memory; call between
    /// closed-loop episodes (Algorithm 2 resets D := D0 per sample).
    pub fn reset(&mut self) {
        self.gpss = self.gpss0.clone();
        self.prev_u = None;
        self.warm = None;
        self.last_xu = None;
        self.diagnostics.clear();
    }

    /// The feedback law: optionally condition on the newly measured
    /// transition (learning variant, noisy conditioning), solve the OCP,
    /// apply the first control.
    pub fn kappa(&mut self, x_t: &[f64], t: usize) -> Result<Vec<f64>, NmpcError> {
        assert!(t < self.spec.t_horizon);
        if self.learning && t > 0 {
            if let Some((px, pu)) = self.last_xu.take() {
                self.gpss = self.gpss.condition_all(&px, &pu, x_t, false)?;
            }
        }
        let start = std::time::Instant::now();
        let result = solve_ocp(
            &self.gpss,
            &self.spec,
            &self.backoffs,
            x_t,
            t,
            self.prev_u.as_deref(),
            self.warm.as_deref(),
        )?;
        self.diagnostics.push(SolveDiagnostics {
            t,
            inner_iterations: result.inner_iterations,
            objective: result.objective,
            max_violation: result.max_violation,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let u0 = result.u[0].clone();
        // shifted warm start for the next solve: drop the applied control,
        // repeat the final one
        let mut warm: Vec<Vec<f64>> = result.u[1..].to_vec();
        if let Some(last) = result.u.last() {
            if !warm.is_empty() || self.spec.t_horizon - t > 1 {
                warm.push(last.clone());
                warm.truncate(self.spec.t_horizon - t - 1);
            }
        }
        self.warm = if warm.is_empty() { None } else { Some(warm) };
        self.prev_u = Some(u0.clone());
        self.last_xu = Some((x_t.to_vec(), u0.clone()));
        Ok(u0)
    }
}
