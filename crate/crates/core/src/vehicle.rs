//! Rigid-body multirotor dynamics and control allocation.
//!
//! Two airframes are supported: a tilted-rotor hexarotor whose allocation
//! matrix has full rank 6 (independent force and torque in the body frame)
//! and a planar quadrotor whose rank-4 allocation couples lateral force with
//! attitude. The state is augmented with the per-rotor thrusts so that the
//! control input of the discretized model is the per-rotor thrust *rate*.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const GRAVITY: f64 = 9.81;

/// Rigid-body pose/twist plus current actuator values (the augmented state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MravState {
    /// World-frame position, m.
    pub position: Vector3<f64>,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Body-to-world attitude.
    pub attitude: UnitQuaternion<f64>,
    /// Body-frame angular velocity, rad/s.
    pub angular_velocity: Vector3<f64>,
    /// Per-rotor thrusts, N. Length equals the rotor count of the airframe.
    pub actuator_values: DVector<f64>,
}

impl MravState {
    pub fn at_rest(position: Vector3<f64>, thrusts: DVector<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            angular_velocity: Vector3::zeros(),
            actuator_values: thrusts,
        }
    }
}

/// Airframe parameters. The rotor layout (positions, tilts, spins) determines
/// whether the vehicle is fully actuated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MravParams {
    pub mass: f64,
    /// Body-frame inertia, kg m^2. Symmetric positive-definite.
    pub inertia: Matrix3<f64>,
    /// Rotor hub positions in the body frame, m.
    pub rotor_positions: Vec<Vector3<f64>>,
    /// Tilt of each rotor about its arm axis, rad. Zero means body-z thrust.
    pub rotor_tilt_angles: Vec<f64>,
    /// +1 / -1 spin handedness per rotor.
    pub spin_directions: Vec<f64>,
    /// Drag torque per unit thrust, m.
    pub drag_torque_coefficient: f64,
    /// Per-rotor thrust bounds, N.
    pub thrust_min: f64,
    pub thrust_max: f64,
    /// Per-rotor thrust rate bounds, N/s.
    pub thrust_rate_min: f64,
    pub thrust_rate_max: f64,
}

impl MravParams {
    pub fn rotor_count(&self) -> usize {
        self.rotor_positions.len()
    }

    /// Tilted-rotor hexarotor: rotors every 60 deg at radius 0.4 m,
    /// alternating tilt about the arm axis, alternating spin.
    pub fn hexarotor(mass: f64, inertia_diag: Vector3<f64>, arm: f64, tilt: f64) -> Self {
        let mut positions = Vec::with_capacity(6);
        let mut tilts = Vec::with_capacity(6);
        let mut spins = Vec::with_capacity(6);
        for i in 0..6 {
            let az = std::f64::consts::FRAC_PI_3 * i as f64;
            positions.push(Vector3::new(arm * az.cos(), arm * az.sin(), 0.0));
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            tilts.push(sign * tilt);
            spins.push(sign);
        }
        Self {
            mass,
            inertia: Matrix3::from_diagonal(&inertia_diag),
            rotor_positions: positions,
            rotor_tilt_angles: tilts,
            spin_directions: spins,
            drag_torque_coefficient: 0.016,
            thrust_min: 0.0,
            thrust_max: 10.0,
            thrust_rate_min: -50.0,
            thrust_rate_max: 50.0,
        }
    }

    /// Default omnidirectional airframe.
    pub fn default_hexarotor() -> Self {
        Self::hexarotor(
            2.0,
            Vector3::new(0.02, 0.02, 0.04),
            0.4,
            20.0_f64.to_radians(),
        )
    }

    /// Planar quadrotor in an X configuration: all rotors thrust along body z.
    pub fn quadrotor(mass: f64, inertia_diag: Vector3<f64>, arm: f64) -> Self {
        let mut positions = Vec::with_capacity(4);
        let mut spins = Vec::with_capacity(4);
        for i in 0..4 {
            let az = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * i as f64;
            positions.push(Vector3::new(arm * az.cos(), arm * az.sin(), 0.0));
            spins.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        Self {
            mass,
            inertia: Matrix3::from_diagonal(&inertia_diag),
            rotor_positions: positions,
            rotor_tilt_angles: vec![0.0; 4],
            spin_directions: spins,
            drag_torque_coefficient: 0.016,
            thrust_min: 0.0,
            thrust_max: 8.0,
            thrust_rate_min: -50.0,
            thrust_rate_max: 50.0,
        }
    }

    pub fn default_quadrotor() -> Self {
        Self::quadrotor(1.5, Vector3::new(0.01, 0.01, 0.02), 0.25)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rotor_count();
        if n != 4 && n != 6 {
            return Err(Error::Validation(format!("rotor count must be 4 or 6, got {n}")));
        }
        if self.rotor_tilt_angles.len() != n || self.spin_directions.len() != n {
            return Err(Error::Validation(
                "rotor_tilt_angles and spin_directions must match rotor count".into(),
            ));
        }
        if self.mass <= 0.0 {
            return Err(Error::Validation("mass must be positive".into()));
        }
        if (self.inertia - self.inertia.transpose()).norm() > 1e-12
            || self.inertia.cholesky().is_none()
        {
            return Err(Error::Validation("inertia must be symmetric positive-definite".into()));
        }
        if self.thrust_min >= self.thrust_max {
            return Err(Error::Validation("thrust_min must be below thrust_max".into()));
        }
        if !(self.thrust_rate_min < 0.0 && self.thrust_rate_max > 0.0) {
            return Err(Error::Validation(
                "thrust rate bounds must straddle zero".into(),
            ));
        }
        Ok(())
    }
}

/// Net body-frame force and torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

/// Thrust axis of one rotor in the body frame: body z tilted about the arm axis.
fn rotor_axis(position: &Vector3<f64>, tilt: f64) -> Vector3<f64> {
    let horizontal = Vector3::new(position.x, position.y, 0.0);
    let arm = if horizontal.norm() > 1e-12 {
        Unit::new_normalize(horizontal)
    } else {
        Vector3::x_axis()
    };
    UnitQuaternion::from_axis_angle(&arm, tilt) * Vector3::z()
}

/// The 6 x n map from per-rotor thrusts to body wrench.
pub fn allocation_matrix(params: &MravParams) -> DMatrix<f64> {
    let n = params.rotor_count();
    let mut b = DMatrix::zeros(6, n);
    for i in 0..n {
        let axis = rotor_axis(&params.rotor_positions[i], params.rotor_tilt_angles[i]);
        let torque = params.rotor_positions[i].cross(&axis)
            + params.spin_directions[i] * params.drag_torque_coefficient * axis;
        for r in 0..3 {
            b[(r, i)] = axis[r];
            b[(r + 3, i)] = torque[r];
        }
    }
    b
}

pub fn wrench_from_thrusts(params: &MravParams, thrusts: &DVector<f64>) -> Result<Wrench> {
    let n = params.rotor_count();
    if thrusts.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} thrusts, got {}",
            thrusts.len()
        )));
    }
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for i in 0..n {
        let axis = rotor_axis(&params.rotor_positions[i], params.rotor_tilt_angles[i]);
        force += thrusts[i] * axis;
        torque += thrusts[i]
            * (params.rotor_positions[i].cross(&axis)
                + params.spin_directions[i] * params.drag_torque_coefficient * axis);
    }
    Ok(Wrench { force, torque })
}

/// Time derivative of the rigid-body part of the state. The attitude
/// derivative is a raw (non-unit) quaternion.
#[derive(Debug, Clone)]
pub struct StateDerivative {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Quaternion<f64>,
    pub angular_velocity: Vector3<f64>,
}

fn derivative_raw(
    params: &MravParams,
    velocity: &Vector3<f64>,
    attitude: &Quaternion<f64>,
    omega: &Vector3<f64>,
    thrusts: &DVector<f64>,
    external_force: &Vector3<f64>,
) -> Result<StateDerivative> {
    let wrench = wrench_from_thrusts(params, thrusts)?;
    let rotation = UnitQuaternion::from_quaternion(*attitude);
    let gravity = Vector3::new(0.0, 0.0, -GRAVITY);
    let accel = (rotation * wrench.force + external_force) / params.mass + gravity;
    let q_dot = attitude * Quaternion::from_imag(*omega) * 0.5;
    let inertia_omega = params.inertia * omega;
    let omega_dot = params
        .inertia
        .cholesky()
        .ok_or_else(|| Error::InvalidState("inertia not positive-definite".into()))?
        .solve(&(wrench.torque - omega.cross(&inertia_omega)));
    Ok(StateDerivative {
        position: *velocity,
        velocity: accel,
        attitude: q_dot,
        angular_velocity: omega_dot,
    })
}

fn check_unit_quaternion(state: &MravState) -> Result<()> {
    let norm = state.attitude.as_ref().norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidState(format!(
            "attitude quaternion norm {norm} departs from 1"
        )));
    }
    Ok(())
}

/// Newton-Euler right-hand side under the given thrusts, before discretization.
pub fn continuous_dynamics(
    params: &MravParams,
    state: &MravState,
    thrusts: &DVector<f64>,
) -> Result<StateDerivative> {
    continuous_dynamics_with_force(params, state, thrusts, &Vector3::zeros())
}

/// As [`continuous_dynamics`] with an additive world-frame disturbance force.
pub fn continuous_dynamics_with_force(
    params: &MravParams,
    state: &MravState,
    thrusts: &DVector<f64>,
    external_force: &Vector3<f64>,
) -> Result<StateDerivative> {
    check_unit_quaternion(state)?;
    derivative_raw(
        params,
        &state.velocity,
        state.attitude.as_ref(),
        &state.angular_velocity,
        thrusts,
        external_force,
    )
}

/// One explicit RK4 step with held thrusts, followed by quaternion
/// renormalization. Deterministic.
pub fn step(
    params: &MravParams,
    state: &MravState,
    thrusts: &DVector<f64>,
    dt: f64,
) -> Result<MravState> {
    step_with_force(params, state, thrusts, dt, &Vector3::zeros())
}

pub fn step_with_force(
    params: &MravParams,
    state: &MravState,
    thrusts: &DVector<f64>,
    dt: f64,
    external_force: &Vector3<f64>,
) -> Result<MravState> {
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    check_unit_quaternion(state)?;

    let p0 = state.position;
    let v0 = state.velocity;
    let q0 = *state.attitude.as_ref();
    let w0 = state.angular_velocity;

    let eval = |p: &Vector3<f64>, v: &Vector3<f64>, q: &Quaternion<f64>, w: &Vector3<f64>| {
        let _ = p;
        derivative_raw(params, v, q, w, thrusts, external_force)
    };

    let k1 = eval(&p0, &v0, &q0, &w0)?;
    let h2 = dt / 2.0;
    let k2 = eval(
        &(p0 + h2 * k1.position),
        &(v0 + h2 * k1.velocity),
        &(q0 + k1.attitude * h2),
        &(w0 + h2 * k1.angular_velocity),
    )?;
    let k3 = eval(
        &(p0 + h2 * k2.position),
        &(v0 + h2 * k2.velocity),
        &(q0 + k2.attitude * h2),
        &(w0 + h2 * k2.angular_velocity),
    )?;
    let k4 = eval(
        &(p0 + dt * k3.position),
        &(v0 + dt * k3.velocity),
        &(q0 + k3.attitude * dt),
        &(w0 + dt * k3.angular_velocity),
    )?;

    let sixth = dt / 6.0;
    let position = p0 + sixth * (k1.position + 2.0 * k2.position + 2.0 * k3.position + k4.position);
    let velocity = v0 + sixth * (k1.velocity + 2.0 * k2.velocity + 2.0 * k3.velocity + k4.velocity);
    let q_raw = q0 + (k1.attitude + k2.attitude * 2.0 + k3.attitude * 2.0 + k4.attitude) * sixth;
    let angular_velocity = w0
        + sixth
            * (k1.angular_velocity
                + 2.0 * k2.angular_velocity
                + 2.0 * k3.angular_velocity
                + k4.angular_velocity);

    Ok(MravState {
        position,
        velocity,
        attitude: UnitQuaternion::from_quaternion(q_raw),
        angular_velocity,
        actuator_values: state.actuator_values.clone(),
    })
}

/// Per-rotor thrusts that cancel gravity with zero net body torque on a
/// symmetric layout: m g / (n cos tilt) each.
pub fn hover_trim(params: &MravParams) -> Result<DVector<f64>> {
    let n = params.rotor_count();
    let tilt = params.rotor_tilt_angles[0].abs();
    if params
        .rotor_tilt_angles
        .iter()
        .any(|t| (t.abs() - tilt).abs() > 1e-9)
    {
        return Err(Error::InvalidInput(
            "hover_trim requires a symmetric rotor layout (equal |tilt|)".into(),
        ));
    }
    let per_rotor = params.mass * GRAVITY / (n as f64 * tilt.cos());
    if per_rotor < params.thrust_min || per_rotor > params.thrust_max {
        return Err(Error::Infeasible(format!(
            "hover thrust {per_rotor:.3} N outside [{}, {}]",
            params.thrust_min, params.thrust_max
        )));
    }
    Ok(DVector::from_element(n, per_rotor))
}

/// Augmented-dynamics step: the rigid body integrates under the current
/// actuator values while the actuator values integrate the commanded rates.
/// Bounds are not clamped here; the optimizer enforces them as constraints.
pub fn augmented_step(
    params: &MravParams,
    state: &MravState,
    thrust_rates: &DVector<f64>,
    dt: f64,
) -> Result<MravState> {
    augmented_step_with_force(params, state, thrust_rates, dt, &Vector3::zeros())
}

pub fn augmented_step_with_force(
    params: &MravParams,
    state: &MravState,
    thrust_rates: &DVector<f64>,
    dt: f64,
    external_force: &Vector3<f64>,
) -> Result<MravState> {
    let n = params.rotor_count();
    if thrust_rates.len() != n {
        return Err(Error::InvalidInput(format!(
            "expected {n} thrust rates, got {}",
            thrust_rates.len()
        )));
    }
    let mut next = step_with_force(params, state, &state.actuator_values, dt, external_force)?;
    next.actuator_values = &state.actuator_values + thrust_rates * dt;
    Ok(next)
}
