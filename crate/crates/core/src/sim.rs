//! Closed-loop scenario engine for the relay mission: a scripted peer
//! vehicle, a fixed ground base station, optional Ornstein-Uhlenbeck wind,
//! the NMPC relay loop, and metric extraction from the resulting log.

use nalgebra::{DVector, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::comms::{self, CommParams, LinkSample, OutputVec};
use crate::nmpc::{NmpcConfig, NmpcController, OcpSolution};
use crate::vehicle::{self, MravParams, MravState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    /// Tilted-rotor hexarotor with independent position/orientation control.
    Omni,
    /// Planar quadrotor baseline.
    Under,
}

impl std::fmt::Display for VehicleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VehicleKind::Omni => write!(f, "omni"),
            VehicleKind::Under => write!(f, "under"),
        }
    }
}

/// Airframe selection plus optional overrides of the default parameters.
/// Comparison runs rewrite `kind` per vehicle before resolving parameters,
/// so the overrides apply to whichever airframe is being run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleSpec {
    pub kind: VehicleKind,
    pub mass: Option<f64>,
    pub inertia_diag: Option<[f64; 3]>,
    pub arm_length: Option<f64>,
    /// Rotor tilt magnitude, rad (hexarotor only).
    pub tilt_angle: Option<f64>,
    pub thrust_min: Option<f64>,
    pub thrust_max: Option<f64>,
    pub thrust_rate_min: Option<f64>,
    pub thrust_rate_max: Option<f64>,
}

impl Default for VehicleSpec {
    fn default() -> Self {
        Self {
            kind: VehicleKind::Omni,
            mass: None,
            inertia_diag: None,
            arm_length: None,
            tilt_angle: None,
            thrust_min: None,
            thrust_max: None,
            thrust_rate_min: None,
            thrust_rate_max: None,
        }
    }
}

impl VehicleSpec {
    pub fn params(&self) -> MravParams {
        self.params_for(self.kind)
    }

    pub fn params_for(&self, kind: VehicleKind) -> MravParams {
        let mut params = match kind {
            VehicleKind::Omni => {
                if kind == self.kind {
                    let i = self.inertia_diag.unwrap_or([0.02, 0.02, 0.04]);
                    MravParams::hexarotor(
                        self.mass.unwrap_or(2.0),
                        Vector3::new(i[0], i[1], i[2]),
                        self.arm_length.unwrap_or(0.4),
                        self.tilt_angle.unwrap_or(20.0_f64.to_radians()),
                    )
                } else {
                    MravParams::default_hexarotor()
                }
            }
            VehicleKind::Under => {
                if kind == self.kind {
                    let i = self.inertia_diag.unwrap_or([0.01, 0.01, 0.02]);
                    MravParams::quadrotor(
                        self.mass.unwrap_or(1.5),
                        Vector3::new(i[0], i[1], i[2]),
                        self.arm_length.unwrap_or(0.25),
                    )
                } else {
                    MravParams::default_quadrotor()
                }
            }
        };
        if kind == self.kind {
            if let Some(v) = self.thrust_min {
                params.thrust_min = v;
            }
            if let Some(v) = self.thrust_max {
                params.thrust_max = v;
            }
            if let Some(v) = self.thrust_rate_min {
                params.thrust_rate_min = v;
            }
            if let Some(v) = self.thrust_rate_max {
                params.thrust_rate_max = v;
            }
        }
        params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vector3<f64>,
}

/// Scripted peer-vehicle mission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySpec {
    Circle {
        center: Vector3<f64>,
        radius: f64,
        period: f64,
        /// Flight altitude; defaults to the center's z.
        altitude: Option<f64>,
    },
    Waypoints(Vec<Waypoint>),
}

impl TrajectorySpec {
    fn validate(&self) -> Result<()> {
        match self {
            TrajectorySpec::Circle { radius, period, .. } => {
                if *radius <= 0.0 {
                    return Err(Error::Validation("uav2.circle.radius must be positive".into()));
                }
                if *period <= 0.0 {
                    return Err(Error::Validation("uav2.circle.period must be positive".into()));
                }
            }
            TrajectorySpec::Waypoints(points) => {
                if points.is_empty() {
                    return Err(Error::Validation("uav2.waypoints must not be empty".into()));
                }
                for pair in points.windows(2) {
                    if pair[1].t <= pair[0].t {
                        return Err(Error::Validation(
                            "uav2.waypoints must have strictly increasing times".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn position(&self, t: f64) -> Vector3<f64> {
        match self {
            TrajectorySpec::Circle {
                center,
                radius,
                period,
                altitude,
            } => {
                let phase = 2.0 * std::f64::consts::PI * t / period;
                Vector3::new(
                    center.x + radius * phase.cos(),
                    center.y + radius * phase.sin(),
                    altitude.unwrap_or(center.z),
                )
            }
            TrajectorySpec::Waypoints(points) => {
                if t <= points[0].t {
                    return points[0].position;
                }
                for pair in points.windows(2) {
                    if t <= pair[1].t {
                        let span = pair[1].t - pair[0].t;
                        let s = (t - pair[0].t) / span;
                        return pair[0].position + s * (pair[1].position - pair[0].position);
                    }
                }
                points[points.len() - 1].position
            }
        }
    }
}

/// Desired relay position: a fixed point, or the point at the given altitude
/// minimizing the larger of the two link distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    Fixed(Vector3<f64>),
    Midpoint {
        /// Fixed flight altitude; defaults to the initial relay altitude.
        altitude: Option<f64>,
    },
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Midpoint { altitude: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateSpec {
    pub position: Vector3<f64>,
    #[serde(default = "Vector3::zeros")]
    pub velocity: Vector3<f64>,
    /// Initial heading about world z, rad.
    #[serde(default)]
    pub yaw: f64,
}

/// Ornstein-Uhlenbeck disturbance force per world axis, N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindSpec {
    pub enabled: bool,
    pub mean: Vector3<f64>,
    /// Stationary standard deviation per axis.
    pub sigma: Vector3<f64>,
    pub correlation_time: f64,
}

impl Default for WindSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            mean: Vector3::zeros(),
            sigma: Vector3::zeros(),
            correlation_time: 2.0,
        }
    }
}

impl WindSpec {
    fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|s| *s < 0.0) {
            return Err(Error::Validation("wind.sigma must be non-negative".into()));
        }
        if self.correlation_time <= 0.0 {
            return Err(Error::Validation("wind.correlation_time must be positive".into()));
        }
        Ok(())
    }
}

/// Zero-mean deviation part of the OU process.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WindState {
    pub deviation: Vector3<f64>,
}

/// Exact-discretization OU update; returns the force sample and the new
/// process state. Disabled wind yields zero without consuming randomness.
pub fn wind_force<R: rand::Rng>(
    spec: &WindSpec,
    state: &WindState,
    dt: f64,
    rng: &mut R,
) -> (Vector3<f64>, WindState) {
    debug_assert!(dt > 0.0);
    if !spec.enabled {
        return (Vector3::zeros(), WindState::default());
    }
    let decay = (-dt / spec.correlation_time).exp();
    let diffusion = (1.0 - decay * decay).sqrt();
    let mut deviation = Vector3::zeros();
    for axis in 0..3 {
        let noise: f64 = StandardNormal.sample(rng);
        deviation[axis] = decay * state.deviation[axis] + spec.sigma[axis] * diffusion * noise;
    }
    (spec.mean + deviation, WindState { deviation })
}

/// Full description of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub duration: f64,
    #[serde(default = "default_sim_dt")]
    pub sim_dt: f64,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    pub bs_position: Vector3<f64>,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    pub uav2: TrajectorySpec,
    #[serde(default)]
    pub relay_reference: ReferenceSpec,
    pub initial_state: InitialStateSpec,
    #[serde(default)]
    pub vehicle: VehicleSpec,
    #[serde(default)]
    pub comm: CommParams,
    #[serde(default)]
    pub nmpc: NmpcConfig,
    #[serde(default)]
    pub wind: WindSpec,
}

fn default_sim_dt() -> f64 {
    0.01
}

fn default_control_dt() -> f64 {
    0.05
}

fn default_seed() -> u64 {
    42
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(Error::Validation("duration must be positive".into()));
        }
        if self.sim_dt <= 0.0 {
            return Err(Error::Validation("sim_dt must be positive".into()));
        }
        let ratio = self.control_dt / self.sim_dt;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::Validation(
                "control_dt must be an integer multiple of sim_dt".into(),
            ));
        }
        self.uav2.validate()?;
        self.vehicle.params().validate()?;
        self.comm.validate()?;
        self.nmpc.validate()?;
        self.wind.validate()?;
        Ok(())
    }

    /// Copy with antenna boresights normalized and every invariant checked.
    pub fn resolved(&self) -> Result<Scenario> {
        let mut out = self.clone();
        out.comm = self.comm.normalized()?;
        out.validate()?;
        Ok(out)
    }

    /// Peer position at time t in [0, duration].
    pub fn uav2_position(&self, t: f64) -> Result<Vector3<f64>> {
        if t < 0.0 || t > self.duration + 1e-9 {
            return Err(Error::InvalidInput(format!(
                "t = {t} outside [0, {}]",
                self.duration
            )));
        }
        Ok(self.uav2.position(t))
    }

    fn uav2_position_clamped(&self, t: f64) -> Vector3<f64> {
        self.uav2.position(t.clamp(0.0, self.duration))
    }

    /// Desired relay position at time t.
    pub fn relay_reference_position(&self, t: f64) -> Vector3<f64> {
        match &self.relay_reference {
            ReferenceSpec::Fixed(p) => *p,
            ReferenceSpec::Midpoint { altitude } => {
                let z = altitude.unwrap_or(self.initial_state.position.z);
                minmax_midpoint(&self.bs_position, &self.uav2_position_clamped(t), z)
            }
        }
    }

    pub fn initial_mrav_state(&self, params: &MravParams) -> Result<MravState> {
        let trim = vehicle::hover_trim(params)?;
        Ok(MravState {
            position: self.initial_state.position,
            velocity: self.initial_state.velocity,
            attitude: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.initial_state.yaw),
            angular_velocity: Vector3::zeros(),
            actuator_values: trim,
        })
    }
}

/// Point at altitude z0 minimizing the larger of the distances to a and b:
/// the equidistant locus at that altitude is a line; take the point on it
/// closest to the nodes. Falls back to the plain xy midpoint when the nodes
/// are vertically aligned.
fn minmax_midpoint(a: &Vector3<f64>, b: &Vector3<f64>, z0: f64) -> Vector3<f64> {
    let n = b - a;
    let m = (a + b) / 2.0;
    let nxy = Vector3::new(n.x, n.y, 0.0);
    let nxy_sq = nxy.norm_squared();
    if nxy_sq < 1e-12 {
        return Vector3::new(m.x, m.y, z0);
    }
    // bisector plane n . (p - m) = 0 intersected with z = z0
    let c = n.dot(&m) - n.z * z0;
    let q = Vector3::new(a.x, a.y, 0.0);
    let p_xy = q + ((c - nxy.dot(&q)) / nxy_sq) * nxy;
    Vector3::new(p_xy.x, p_xy.y, z0)
}

/// One control step of the closed-loop record.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLogEntry {
    pub t: f64,
    pub state: MravState,
    pub commanded_rates: DVector<f64>,
    pub link_bs: LinkSample,
    pub link_uav2: LinkSample,
    pub margins: Vec<f64>,
    pub end_to_end_rate: f64,
    pub reference_position: Vector3<f64>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub entries: Vec<SimLogEntry>,
}

/// Same NMPC machinery applied to the quadrotor baseline, whose rank-4
/// allocation couples lateral force and attitude.
pub fn baseline_underactuated_step(
    controller: &mut NmpcController,
    measured: &MravState,
    references: &[OutputVec],
    uav2_positions: &[Vector3<f64>],
) -> Result<(DVector<f64>, OcpSolution)> {
    if controller.vehicle().rotor_count() != 4 {
        return Err(Error::InvalidInput(
            "baseline_underactuated_step requires quadrotor parameters".into(),
        ));
    }
    controller.receding_step(measured, references, uav2_positions)
}

/// Runs the scenario closed loop: solve at every control step, hold the
/// commanded rates across the physics substeps with wind injection, log one
/// entry per control step (plus the terminal state). Solver failures fall
/// back to zero rates for that step and are flagged in the log.
pub fn run_closed_loop(scenario: &Scenario) -> Result<SimLog> {
    let sc = scenario.resolved()?;
    let params = sc.vehicle.params();
    let horizon = sc.nmpc.horizon;
    let step_dt = sc.nmpc.step_dt;
    let n = params.rotor_count();

    let mut controller = NmpcController::new(
        params.clone(),
        sc.comm.clone(),
        sc.nmpc.clone(),
        sc.bs_position,
    );
    let mut state = sc.initial_mrav_state(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.rng_seed);
    let mut wind_state = WindState::default();

    let steps = (sc.duration / sc.control_dt + 1e-9).floor() as usize;
    let substeps = (sc.control_dt / sc.sim_dt).round() as usize;
    let mut entries = Vec::with_capacity(steps + 1);

    for k in 0..=steps {
        let t = k as f64 * sc.control_dt;

        let mut references = Vec::with_capacity(horizon + 1);
        let mut predictions = Vec::with_capacity(horizon + 1);
        for i in 0..=horizon {
            let ti = (t + i as f64 * step_dt).min(sc.duration);
            let r = sc.relay_reference_position(ti);
            references.push(OutputVec::new(r.x, r.y, r.z, 0.0, 0.0));
            predictions.push(sc.uav2_position_clamped(ti));
        }

        let step_result = if n == 4 {
            baseline_underactuated_step(&mut controller, &state, &references, &predictions)
        } else {
            controller.receding_step(&state, &references, &predictions)
        };
        let (rates, cost, kkt, iterations, converged) = match step_result {
            Ok((rates, sol)) => (rates, sol.cost, sol.kkt_residual, sol.iterations, sol.converged),
            Err(_) => (DVector::zeros(n), 0.0, 0.0, 0, false),
        };

        let uav2_now = sc.uav2_position_clamped(t);
        let link_bs = comms::relay_link_sample(
            &state,
            &sc.comm,
            &sc.comm.relay_antenna_bs,
            &sc.comm.bs_antenna,
            &sc.bs_position,
        )?;
        let link_uav2 = comms::relay_link_sample(
            &state,
            &sc.comm,
            &sc.comm.relay_antenna_uav2,
            &sc.comm.uav2_antenna,
            &uav2_now,
        )?;
        let margins = comms::alignment_margins(&state, &sc.comm, &sc.bs_position, &uav2_now)?;
        let end_to_end = comms::end_to_end_rate(link_bs.snr_db, link_uav2.snr_db);

        entries.push(SimLogEntry {
            t,
            state: state.clone(),
            commanded_rates: rates.clone(),
            link_bs,
            link_uav2,
            margins,
            end_to_end_rate: end_to_end,
            reference_position: sc.relay_reference_position(t),
            cost,
            kkt_residual: kkt,
            iterations,
            converged,
        });

        if k < steps {
            for _ in 0..substeps {
                let (force, next_wind) = wind_force(&sc.wind, &wind_state, sc.sim_dt, &mut rng);
                wind_state = next_wind;
                state = plant_step(&params, &state, &rates, sc.sim_dt, &force)?;
            }
        }
    }

    Ok(SimLog { entries })
}

/// One physics substep of the simulated plant: integrate the augmented
/// dynamics, then saturate the rotor thrusts at their physical limits. The
/// optimizer enforces the thrust bounds softly, so without saturation the
/// plant state could drift outside the actuator envelope and leave the
/// one-step-ahead bound constraints structurally infeasible.
pub fn plant_step(
    params: &MravParams,
    state: &MravState,
    rates: &DVector<f64>,
    dt: f64,
    external_force: &Vector3<f64>,
) -> Result<MravState> {
    let mut next = vehicle::augmented_step_with_force(params, state, rates, dt, external_force)?;
    for i in 0..next.actuator_values.len() {
        next.actuator_values[i] =
            next.actuator_values[i].clamp(params.thrust_min, params.thrust_max);
    }
    Ok(next)
}

/// Aggregate run statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of steps with both alignment margins positive.
    pub alignment_satisfaction_fraction: f64,
    pub mean_misalignment_bs_rad: f64,
    pub max_misalignment_bs_rad: f64,
    pub mean_misalignment_uav2_rad: f64,
    pub max_misalignment_uav2_rad: f64,
    pub mean_snr_bs_db: f64,
    pub min_snr_bs_db: f64,
    pub mean_snr_uav2_db: f64,
    pub min_snr_uav2_db: f64,
    pub mean_end_to_end_rate_bps_hz: f64,
    /// Fraction of steps with zero rate or a violated margin.
    pub outage_fraction: f64,
    pub rms_position_error_m: f64,
    pub solver_convergence_rate: f64,
}

pub fn metrics(log: &SimLog) -> Result<Metrics> {
    if log.entries.is_empty() {
        return Err(Error::InvalidInput("metrics require a non-empty log".into()));
    }
    let count = log.entries.len() as f64;
    let mut satisfied = 0usize;
    let mut outages = 0usize;
    let mut converged = 0usize;
    let mut sum_mis_bs = 0.0;
    let mut max_mis_bs: f64 = 0.0;
    let mut sum_mis_u2 = 0.0;
    let mut max_mis_u2: f64 = 0.0;
    let mut sum_snr_bs = 0.0;
    let mut min_snr_bs = f64::INFINITY;
    let mut sum_snr_u2 = 0.0;
    let mut min_snr_u2 = f64::INFINITY;
    let mut sum_rate = 0.0;
    let mut sum_sq_pos_err = 0.0;

    for e in &log.entries {
        if e.margins.iter().all(|m| *m > 0.0) {
            satisfied += 1;
        }
        if e.end_to_end_rate == 0.0 || e.margins.iter().any(|m| *m < 0.0) {
            outages += 1;
        }
        if e.converged {
            converged += 1;
        }
        sum_mis_bs += e.link_bs.misalignment_tx;
        max_mis_bs = max_mis_bs.max(e.link_bs.misalignment_tx);
        sum_mis_u2 += e.link_uav2.misalignment_tx;
        max_mis_u2 = max_mis_u2.max(e.link_uav2.misalignment_tx);
        sum_snr_bs += e.link_bs.snr_db;
        min_snr_bs = min_snr_bs.min(e.link_bs.snr_db);
        sum_snr_u2 += e.link_uav2.snr_db;
        min_snr_u2 = min_snr_u2.min(e.link_uav2.snr_db);
        sum_rate += e.end_to_end_rate;
        sum_sq_pos_err += (e.state.position - e.reference_position).norm_squared();
    }

    Ok(Metrics {
        alignment_satisfaction_fraction: satisfied as f64 / count,
        mean_misalignment_bs_rad: sum_mis_bs / count,
        max_misalignment_bs_rad: max_mis_bs,
        mean_misalignment_uav2_rad: sum_mis_u2 / count,
        max_misalignment_uav2_rad: max_mis_u2,
        mean_snr_bs_db: sum_snr_bs / count,
        min_snr_bs_db: min_snr_bs,
        mean_snr_uav2_db: sum_snr_u2 / count,
        min_snr_uav2_db: min_snr_u2,
        mean_end_to_end_rate_bps_hz: sum_rate / count,
        outage_fraction: outages as f64 / count,
        rms_position_error_m: (sum_sq_pos_err / count).sqrt(),
        solver_convergence_rate: converged as f64 / count,
    })
}
