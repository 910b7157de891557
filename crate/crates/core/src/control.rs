//! Disturbance-aware geometric (Lee) tracking controller and motor mixing.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{mixing_matrix, vee, Disturbance, QuadParams, RigidBodyState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlGains {
    pub k_x: f64,
    pub k_v: f64,
    pub k_r: f64,
    pub k_omega: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self { k_x: 0.4, k_v: 0.2, k_r: 1e-3, k_omega: 2e-4 }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<()> {
        if [self.k_x, self.k_v, self.k_r, self.k_omega].iter().all(|k| k.is_finite() && *k > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("control gains must be strictly positive".into()))
        }
    }
}

/// Per-motor thrust limits applied after mixing (N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotorLimits {
    pub min_n: f64,
    pub max_n: f64,
}

impl Default for MotorLimits {
    fn default() -> Self {
        Self { min_n: 0.0, max_n: 0.15 }
    }
}

impl MotorLimits {
    pub fn saturate(&self, thrusts: &Vector4<f64>) -> Vector4<f64> {
        thrusts.map(|t| t.clamp(self.min_n, self.max_n))
    }
}

/// Commanded setpoint with feed-forward velocity and acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReferencePoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub yaw: f64,
}

impl ReferencePoint {
    pub fn hold(position: Vector3<f64>) -> Self {
        Self { position, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustMoment {
    pub thrust: f64,
    pub moment: Vector3<f64>,
}

impl ThrustMoment {
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.moment.x, self.moment.y, self.moment.z)
    }
}

/// Desired attitude whose third axis follows `force` and whose heading
/// follows `yaw`.
pub fn desired_attitude(force: &Vector3<f64>, yaw: f64) -> Result<Matrix3<f64>> {
    let norm = force.norm();
    if !(norm >= 1e-9) {
        return Err(Error::DegenerateReference);
    }
    let b3 = force / norm;
    let b1_d = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let b2 = b3.cross(&b1_d);
    let b2_norm = b2.norm();
    if !(b2_norm >= 1e-9) {
        return Err(Error::DegenerateReference);
    }
    let b2 = b2 / b2_norm;
    let b1 = b2.cross(&b3);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Lee controller with the estimated wind force and torque fed forward.
///
/// The desired rate and its derivative are taken as zero, so the
/// `J(Ω̂ RᵀR_c Ω_c − RᵀR_c Ω̇_c)` term vanishes.
pub fn lee_control(
    state: &RigidBodyState,
    reference: &ReferencePoint,
    gains: &ControlGains,
    params: &QuadParams,
    dist_estimate: &Disturbance,
) -> Result<ThrustMoment> {
    let m = params.mass_kg;
    let e3 = Vector3::z();
    let r = &state.attitude;
    let omega = &state.angular_velocity;

    let e_x = state.position - reference.position;
    let e_v = state.velocity - reference.velocity;
    let desired_force =
        -gains.k_x * e_x - gains.k_v * e_v + e3 * (m * params.gravity_mps2) + reference.acceleration * m
            - dist_estimate.force;
    let r_c = desired_attitude(&desired_force, reference.yaw)?;
    let thrust = desired_force.dot(&(r * e3));

    let omega_c = Vector3::zeros();
    let omega_c_dot = Vector3::zeros();
    let e_r = vee(&(r_c.transpose() * r - r.transpose() * r_c)) * 0.5;
    let transported = r.transpose() * r_c;
    let e_omega = omega - transported * omega_c;

    let inertia = params.inertia();
    let j_omega = inertia.component_mul(omega);
    let feedforward = omega.cross(&(transported * omega_c)) - transported * omega_c_dot;
    let moment = -gains.k_r * e_r - gains.k_omega * e_omega + omega.cross(&j_omega)
        - inertia.component_mul(&feedforward)
        - dist_estimate.torque;

    Ok(ThrustMoment { thrust, moment })
}

/// Inverts the motor layout map between individual thrusts and `(f, M)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorMixer {
    forward: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

impl MotorMixer {
    pub fn new(params: &QuadParams) -> Result<Self> {
        if !(params.arm_length_m > 0.0 && params.c_tau > 0.0) {
            return Err(Error::InvalidParameter("mixing matrix is singular: d and c_tau must be positive".into()));
        }
        let forward = mixing_matrix(params);
        let inverse =
            forward.try_inverse().ok_or_else(|| Error::InvalidParameter("mixing matrix is singular".into()))?;
        Ok(Self { forward, inverse })
    }

    pub fn mix(&self, tm: &ThrustMoment) -> Vector4<f64> {
        self.inverse * tm.as_vector()
    }

    pub fn unmix(&self, thrusts: &Vector4<f64>) -> ThrustMoment {
        let w = self.forward * thrusts;
        ThrustMoment { thrust: w[0], moment: Vector3::new(w[1], w[2], w[3]) }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.forward
    }
}

pub fn mix_motors(tm: &ThrustMoment, params: &QuadParams) -> Result<Vector4<f64>> {
    Ok(MotorMixer::new(params)?.mix(tm))
}
