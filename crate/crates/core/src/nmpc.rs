//! Finite-horizon optimal control of the relay and its receding-horizon
//! application.
//!
//! The transcription is single shooting over the per-rotor thrust rates: the
//! augmented dynamics integrate the rates, the output map turns predicted
//! states into tracked outputs, and the weighted tracking error plus a small
//! rate regularization form a least-squares cost. Alignment-cone margins and
//! thrust-value bounds are handled by an augmented Lagrangian; thrust-rate
//! bounds are a hard box enforced by projection inside the line search.
//! Derivatives come from central finite differences on the residual vector,
//! so the Gauss-Newton model is exact for the tracking term.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::comms::{self, CommParams, OutputVec, OUTPUT_DIM};
use crate::vehicle::{self, MravParams, MravState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub kkt_tolerance: f64,
    pub constraint_tolerance: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub finite_difference_epsilon: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 5,
            max_inner_iterations: 30,
            kkt_tolerance: 1e-3,
            constraint_tolerance: 1e-6,
            penalty_initial: 1.0,
            penalty_growth: 10.0,
            finite_difference_epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcConfig {
    /// Horizon length N, steps.
    pub horizon: usize,
    /// Prediction step, s.
    pub step_dt: f64,
    /// Diagonal output weights (position x3, misalignment x2).
    pub output_weights: [f64; OUTPUT_DIM],
    /// Regularization on the thrust-rate inputs.
    pub rate_weight: f64,
    pub solver: SolverConfig,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            step_dt: 0.05,
            output_weights: [1.0, 1.0, 1.0, 50.0, 50.0],
            rate_weight: 1e-4,
            solver: SolverConfig::default(),
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Validation("nmpc horizon must be at least 1".into()));
        }
        if self.step_dt <= 0.0 {
            return Err(Error::Validation("nmpc step_dt must be positive".into()));
        }
        if self.output_weights.iter().any(|w| *w < 0.0)
            || self.output_weights.iter().all(|w| *w == 0.0)
        {
            return Err(Error::Validation(
                "output_weights must be non-negative with at least one positive entry".into(),
            ));
        }
        if self.rate_weight < 0.0 {
            return Err(Error::Validation("rate_weight must be non-negative".into()));
        }
        let s = &self.solver;
        if s.kkt_tolerance <= 0.0
            || s.constraint_tolerance <= 0.0
            || s.penalty_initial <= 0.0
            || s.finite_difference_epsilon <= 0.0
        {
            return Err(Error::Validation("solver tolerances must be positive".into()));
        }
        if s.penalty_growth <= 1.0 {
            return Err(Error::Validation("penalty_growth must exceed 1".into()));
        }
        Ok(())
    }
}

/// One finite-horizon problem instance.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub initial_state: MravState,
    /// Desired outputs y_d over k = 0..N (length N+1).
    pub references: Vec<OutputVec>,
    pub vehicle: MravParams,
    pub comm: CommParams,
    pub bs_position: Vector3<f64>,
    /// Predicted peer positions over k = 0..N (length N+1).
    pub uav2_positions: Vec<Vector3<f64>>,
    pub config: NmpcConfig,
}

impl OcpProblem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.vehicle.validate()?;
        self.comm.validate()?;
        let expect = self.config.horizon + 1;
        if self.references.len() != expect {
            return Err(Error::InvalidInput(format!(
                "references length {} != N+1 = {expect}",
                self.references.len()
            )));
        }
        if self.uav2_positions.len() != expect {
            return Err(Error::InvalidInput(format!(
                "uav2_positions length {} != N+1 = {expect}",
                self.uav2_positions.len()
            )));
        }
        if self.initial_state.actuator_values.len() != self.vehicle.rotor_count() {
            return Err(Error::InvalidInput(
                "initial state actuator count does not match the airframe".into(),
            ));
        }
        Ok(())
    }

    fn rotor_count(&self) -> usize {
        self.vehicle.rotor_count()
    }

    fn margin_count(&self) -> usize {
        if self.comm.min_snr_db.is_some() {
            3
        } else {
            2
        }
    }

    /// Inequality constraints per horizon step k = 1..N: alignment margins
    /// followed by per-rotor thrust bound margins.
    fn constraints_per_step(&self) -> usize {
        self.margin_count() + 2 * self.rotor_count()
    }
}

/// Result of a single solve. Always populated with the best iterate found,
/// converged or not.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Thrust-rate sequence, N rows by n columns.
    pub thrust_rates: DMatrix<f64>,
    pub predicted_states: Vec<MravState>,
    pub predicted_outputs: Vec<OutputVec>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// (penalty, max violation) after each augmented-Lagrangian outer pass.
    pub outer_progress: Vec<(f64, f64)>,
}

pub struct Rollout {
    pub states: Vec<MravState>,
    pub outputs: Vec<OutputVec>,
    pub cost: f64,
}

fn rate_row(z: &DVector<f64>, k: usize, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|i| z[k * n + i]))
}

/// Integrates the horizon under the given flat rate vector and evaluates the
/// tracking cost plus rate regularization.
pub fn rollout_flat(problem: &OcpProblem, z: &DVector<f64>) -> Result<Rollout> {
    let n = problem.rotor_count();
    let horizon = problem.config.horizon;
    if z.len() != n * horizon {
        return Err(Error::InvalidInput(format!(
            "rate vector length {} != N*n = {}",
            z.len(),
            n * horizon
        )));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut outputs = Vec::with_capacity(horizon + 1);
    states.push(problem.initial_state.clone());
    for k in 0..horizon {
        let rates = rate_row(z, k, n);
        let next = vehicle::augmented_step(
            &problem.vehicle,
            &states[k],
            &rates,
            problem.config.step_dt,
        )?;
        states.push(next);
    }
    let mut cost = 0.0;
    for k in 0..=horizon {
        let y = comms::output_map(
            &states[k],
            &problem.comm,
            &problem.bs_position,
            &problem.uav2_positions[k],
        )?;
        let err = problem.references[k] - y;
        for i in 0..OUTPUT_DIM {
            cost += problem.config.output_weights[i] * err[i] * err[i];
        }
        outputs.push(y);
    }
    cost += problem.config.rate_weight * z.norm_squared();
    Ok(Rollout { states, outputs, cost })
}

/// As [`rollout_flat`] with the rates given as an N x n matrix.
pub fn rollout(problem: &OcpProblem, rates: &DMatrix<f64>) -> Result<Rollout> {
    let n = problem.rotor_count();
    let horizon = problem.config.horizon;
    if rates.nrows() != horizon || rates.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "rates shape {}x{} != {horizon}x{n}",
            rates.nrows(),
            rates.ncols()
        )));
    }
    rollout_flat(problem, &flatten(rates))
}

fn flatten(rates: &DMatrix<f64>) -> DVector<f64> {
    let (n_steps, n) = (rates.nrows(), rates.ncols());
    DVector::from_fn(n_steps * n, |idx, _| rates[(idx / n, idx % n)])
}

fn unflatten(z: &DVector<f64>, horizon: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(horizon, n, |k, i| z[k * n + i])
}

/// Inequality constraint values c(z) >= 0 for the rolled-out states,
/// k = 1..N (the initial state is fixed).
fn constraint_values(problem: &OcpProblem, states: &[MravState]) -> Result<DVector<f64>> {
    let horizon = problem.config.horizon;
    let n = problem.rotor_count();
    let mut c = Vec::with_capacity(horizon * problem.constraints_per_step());
    for k in 1..=horizon {
        let margins = comms::alignment_margins(
            &states[k],
            &problem.comm,
            &problem.bs_position,
            &problem.uav2_positions[k],
        )?;
        c.extend_from_slice(&margins);
        for i in 0..n {
            c.push(states[k].actuator_values[i] - problem.vehicle.thrust_min);
            c.push(problem.vehicle.thrust_max - states[k].actuator_values[i]);
        }
    }
    Ok(DVector::from_vec(c))
}

fn max_violation(c: &DVector<f64>) -> f64 {
    c.iter().fold(0.0, |acc: f64, &ci| acc.max(-ci))
}

/// Least-squares residual of the tracking cost and rate regularization only.
fn cost_residuals(problem: &OcpProblem, z: &DVector<f64>, out: &mut Vec<f64>) -> Result<Rollout> {
    let roll = rollout_flat(problem, z)?;
    for k in 0..=problem.config.horizon {
        let err = roll.outputs[k] - problem.references[k];
        for i in 0..OUTPUT_DIM {
            out.push(problem.config.output_weights[i].sqrt() * err[i]);
        }
    }
    let sw = problem.config.rate_weight.sqrt();
    for zi in z.iter() {
        out.push(sw * zi);
    }
    Ok(roll)
}

/// Full augmented-Lagrangian residual: cost residuals plus one term
/// max(0, lambda - mu c_j) / sqrt(2 mu) per inequality.
fn al_residuals(
    problem: &OcpProblem,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: f64,
) -> Result<DVector<f64>> {
    let mut out = Vec::new();
    let roll = cost_residuals(problem, z, &mut out)?;
    let c = constraint_values(problem, &roll.states)?;
    let scale = 1.0 / (2.0 * mu).sqrt();
    for j in 0..c.len() {
        out.push(scale * (lambda[j] - mu * c[j]).max(0.0));
    }
    Ok(DVector::from_vec(out))
}

/// Central-difference Jacobian, column by column.
pub fn finite_difference_jacobian<F>(f: F, point: &DVector<f64>, epsilon: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    fd_jacobian_fallible(|x| Ok(f(x)), point, epsilon).expect("infallible function")
}

fn fd_jacobian_fallible<F>(f: F, point: &DVector<f64>, epsilon: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = point.len();
    let probe = f(point)?;
    let m = probe.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut x = point.clone();
    for j in 0..n {
        let xj = point[j];
        x[j] = xj + epsilon;
        let plus = f(&x)?;
        x[j] = xj - epsilon;
        let minus = f(&x)?;
        x[j] = xj;
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * epsilon);
        }
    }
    Ok(jac)
}

/// Forward-difference Jacobian reusing an already-evaluated base residual;
/// half the cost of the central variant, accurate enough for step directions.
fn fd_jacobian_forward<F>(
    f: F,
    point: &DVector<f64>,
    base: &DVector<f64>,
    epsilon: f64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = point.len();
    let m = base.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut x = point.clone();
    for j in 0..n {
        let xj = point[j];
        x[j] = xj + epsilon;
        let plus = f(&x)?;
        x[j] = xj;
        for i in 0..m {
            jac[(i, j)] = (plus[i] - base[i]) / epsilon;
        }
    }
    Ok(jac)
}

/// Gauss-Newton gradient of the rollout cost (no constraint terms):
/// 2 J^T r with J the finite-difference Jacobian of the cost residuals.
pub fn cost_gradient(problem: &OcpProblem, rates: &DMatrix<f64>) -> Result<DVector<f64>> {
    let z = flatten(rates);
    let mut r = Vec::new();
    cost_residuals(problem, &z, &mut r)?;
    let r = DVector::from_vec(r);
    let eps = problem.config.solver.finite_difference_epsilon;
    let jac = fd_jacobian_fallible(
        |x| {
            let mut out = Vec::new();
            cost_residuals(problem, x, &mut out)?;
            Ok(DVector::from_vec(out))
        },
        &z,
        eps,
    )?;
    Ok(2.0 * jac.transpose() * r)
}

fn project(z: &mut DVector<f64>, lo: f64, hi: f64) {
    for zi in z.iter_mut() {
        *zi = zi.clamp(lo, hi);
    }
}

struct InnerResult {
    z: DVector<f64>,
    kkt: f64,
    iterations: usize,
    progressed: bool,
}

/// Projected Gauss-Newton descent on the augmented-Lagrangian least-squares
/// merit with backtracking line search.
fn gauss_newton_inner(
    problem: &OcpProblem,
    z0: DVector<f64>,
    lambda: &DVector<f64>,
    mu: f64,
) -> Result<InnerResult> {
    let cfg = &problem.config.solver;
    let lo = problem.vehicle.thrust_rate_min;
    let hi = problem.vehicle.thrust_rate_max;
    let mut z = z0;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;
    let mut progressed = false;
    // Levenberg-Marquardt damping, adapted across iterations.
    let mut damping = 1e-2;

    for _ in 0..cfg.max_inner_iterations {
        iterations += 1;
        let r = al_residuals(problem, &z, lambda, mu)?;
        let jac = fd_jacobian_forward(
            |x| al_residuals(problem, x, lambda, mu),
            &z,
            &r,
            cfg.finite_difference_epsilon,
        )?;
        let jt_r = jac.transpose() * &r;
        let grad = 2.0 * &jt_r;

        // projected-gradient stationarity measure
        let mut stepped = &z - &grad;
        project(&mut stepped, lo, hi);
        kkt = (&z - &stepped).amax();
        if kkt < cfg.kkt_tolerance {
            break;
        }

        let h = jac.transpose() * &jac;
        let n = h.nrows();
        let floor = 1e-6 * h.trace().max(1e-12) / n as f64;
        let merit0 = r.norm_squared();

        // Marquardt-scaled damped step; grow the damping until the projected
        // trial descends
        let mut accepted = false;
        for _ in 0..25 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += damping * h[(i, i)].max(floor);
            }
            let delta = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&jt_r)),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            let mut trial = &z + &delta;
            project(&mut trial, lo, hi);
            let merit = al_residuals(problem, &trial, lambda, mu)?.norm_squared();
            if merit < merit0 {
                z = trial;
                accepted = true;
                progressed = true;
                damping = (damping / 3.0).max(1e-10);
                // a step this flat will not reach stationarity within any
                // sane budget; spend the remaining time on fresh linearizations
                if merit0 - merit < 1e-5 * merit0 {
                    return Ok(InnerResult {
                        z,
                        kkt,
                        iterations,
                        progressed,
                    });
                }
                break;
            }
            damping *= 10.0;
            if damping > 1e12 {
                break;
            }
        }
        if !accepted {
            // trust region collapsed to nothing; stop the inner loop
            break;
        }
    }
    Ok(InnerResult {
        z,
        kkt,
        iterations,
        progressed,
    })
}

/// Solves the finite-horizon problem. Returns the best iterate found; the
/// `converged` flag reports whether both the stationarity and feasibility
/// tolerances were met.
pub fn solve(problem: &OcpProblem, warm_start: Option<&DMatrix<f64>>) -> Result<OcpSolution> {
    solve_with_multipliers(problem, warm_start, None).map(|(sol, _)| sol)
}

/// As [`solve`], but with warm-started inequality multipliers; returns the
/// final multipliers so a receding-horizon caller can carry them across
/// steps. Constraints whose optimum sits on the boundary keep a persistent
/// multiplier that way, which drives the residual violation toward zero
/// without re-growing the penalty every solve.
pub fn solve_with_multipliers(
    problem: &OcpProblem,
    warm_start: Option<&DMatrix<f64>>,
    warm_multipliers: Option<&DVector<f64>>,
) -> Result<(OcpSolution, DVector<f64>)> {
    problem.validate()?;
    let n = problem.rotor_count();
    let horizon = problem.config.horizon;
    let cfg = problem.config.solver.clone();
    let lo = problem.vehicle.thrust_rate_min;
    let hi = problem.vehicle.thrust_rate_max;

    let mut z = match warm_start {
        Some(rates) => {
            if rates.nrows() != horizon || rates.ncols() != n {
                return Err(Error::InvalidInput(format!(
                    "warm start shape {}x{} != {horizon}x{n}",
                    rates.nrows(),
                    rates.ncols()
                )));
            }
            flatten(rates)
        }
        None => DVector::zeros(horizon * n),
    };
    project(&mut z, lo, hi);

    let n_con = horizon * problem.constraints_per_step();
    let mut lambda = match warm_multipliers {
        Some(lam) if lam.len() == n_con => lam.clone(),
        Some(lam) => {
            return Err(Error::InvalidInput(format!(
                "multiplier warm start length {} != {n_con}",
                lam.len()
            )))
        }
        None => DVector::zeros(n_con),
    };
    let mut mu = cfg.penalty_initial;

    let mut best: Option<(DVector<f64>, f64, f64, f64)> = None; // z, cost, viol, kkt
    let mut outer_progress = Vec::new();
    let mut total_iterations = 0;
    let mut converged = false;
    let mut prev_viol = f64::INFINITY;

    for _ in 0..cfg.max_outer_iterations {
        let inner = gauss_newton_inner(problem, z, &lambda, mu)?;
        z = inner.z;
        total_iterations += inner.iterations;

        let roll = rollout_flat(problem, &z)?;
        let c = constraint_values(problem, &roll.states)?;
        let viol = max_violation(&c);
        let cost = roll.cost;
        outer_progress.push((mu, viol));

        let better = match &best {
            None => true,
            Some((_, best_cost, best_viol, _)) => {
                let feasible = viol <= cfg.constraint_tolerance;
                let best_feasible = *best_viol <= cfg.constraint_tolerance;
                match (feasible, best_feasible) {
                    (true, true) => cost < *best_cost,
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => viol < *best_viol,
                }
            }
        };
        if better {
            best = Some((z.clone(), cost, viol, inner.kkt));
        }

        if inner.kkt < cfg.kkt_tolerance && viol < cfg.constraint_tolerance {
            converged = true;
            break;
        }
        // a stalled feasible iterate will not move again under unchanged
        // multipliers, so further outer passes are pointless
        if !inner.progressed && viol <= cfg.constraint_tolerance {
            break;
        }

        // first-order multiplier update, then tighten the penalty if the
        // violation is not shrinking fast enough
        for j in 0..n_con {
            lambda[j] = (lambda[j] - mu * c[j]).max(0.0);
        }
        if viol > cfg.constraint_tolerance && viol > 0.25 * prev_viol {
            mu = (mu * cfg.penalty_growth).min(1e8);
        }
        prev_viol = viol;
    }

    let (z_best, cost, viol, kkt) = best.expect("at least one outer iteration ran");
    converged = converged || (kkt < cfg.kkt_tolerance && viol < cfg.constraint_tolerance);
    let roll = rollout_flat(problem, &z_best)?;
    Ok((
        OcpSolution {
            thrust_rates: unflatten(&z_best, horizon, n),
            predicted_states: roll.states,
            predicted_outputs: roll.outputs,
            cost,
            kkt_residual: kkt,
            max_constraint_violation: viol,
            iterations: total_iterations,
            converged,
            outer_progress,
        },
        lambda,
    ))
}

/// Receding-horizon wrapper: owns the warm start between calls.
pub struct NmpcController {
    vehicle: MravParams,
    comm: CommParams,
    config: NmpcConfig,
    bs_position: Vector3<f64>,
    previous: Option<DMatrix<f64>>,
    previous_multipliers: Option<DVector<f64>>,
    last_warm: Option<DMatrix<f64>>,
}

impl NmpcController {
    pub fn new(
        vehicle: MravParams,
        comm: CommParams,
        config: NmpcConfig,
        bs_position: Vector3<f64>,
    ) -> Self {
        Self {
            vehicle,
            comm,
            config,
            bs_position,
            previous: None,
            previous_multipliers: None,
            last_warm: None,
        }
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.config
    }

    pub fn vehicle(&self) -> &MravParams {
        &self.vehicle
    }

    /// Warm start used by the most recent call (previous solution shifted by
    /// one step, last row repeated).
    pub fn last_warm_start(&self) -> Option<&DMatrix<f64>> {
        self.last_warm.as_ref()
    }

    /// Builds and solves the problem at the current time, applying the
    /// previous solution shifted one step as warm start. Returns the first
    /// rate vector and the full solution as diagnostics.
    pub fn receding_step(
        &mut self,
        measured: &MravState,
        references: &[OutputVec],
        uav2_positions: &[Vector3<f64>],
    ) -> Result<(DVector<f64>, OcpSolution)> {
        let problem = OcpProblem {
            initial_state: measured.clone(),
            references: references.to_vec(),
            vehicle: self.vehicle.clone(),
            comm: self.comm.clone(),
            bs_position: self.bs_position,
            uav2_positions: uav2_positions.to_vec(),
            config: self.config.clone(),
        };
        let warm = self.previous.as_ref().map(|rates| {
            let (rows, cols) = (rates.nrows(), rates.ncols());
            DMatrix::from_fn(rows, cols, |k, i| {
                if k + 1 < rows {
                    rates[(k + 1, i)]
                } else {
                    rates[(rows - 1, i)]
                }
            })
        });
        self.last_warm = warm.clone();
        // shift the multiplier blocks (one block of inequality multipliers
        // per horizon step) alongside the rate warm start
        let per = problem.constraints_per_step();
        let warm_lambda = self.previous_multipliers.as_ref().map(|lam| {
            let blocks = lam.len() / per;
            DVector::from_fn(lam.len(), |j, _| {
                let (k, s) = (j / per, j % per);
                let src = (k + 1).min(blocks - 1);
                lam[src * per + s]
            })
        });
        let (solution, lambda) =
            solve_with_multipliers(&problem, warm.as_ref(), warm_lambda.as_ref())?;
        // only trust multipliers from a converged solve: carrying them out of
        // a failed solve lets persistently infeasible constraints ratchet the
        // multipliers upward until they crowd out the tracking objective
        self.previous_multipliers = if solution.converged {
            Some(lambda)
        } else {
            None
        };
        self.previous = Some(solution.thrust_rates.clone());
        let first = DVector::from_iterator(
            self.vehicle.rotor_count(),
            solution.thrust_rates.row(0).iter().copied(),
        );
        Ok((first, solution))
    }
}
