//! Rigid-body quadrotor plant, wind contexts and the position/velocity sensor.

use nalgebra::{Matrix3, Rotation3, Vector3, Vector4, Vector6};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Physical constants of the airframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    pub mass_kg: f64,
    /// Diagonal of the body inertia matrix (kg·m²).
    pub inertia_diag_kgm2: [f64; 3],
    /// Distance from each motor to the center (m).
    pub arm_length_m: f64,
    /// Thrust-to-yaw-torque ratio.
    pub c_tau: f64,
    pub gravity_mps2: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass_kg: 0.033,
            inertia_diag_kgm2: [1.66e-5, 1.66e-5, 2.93e-5],
            arm_length_m: 0.0397,
            c_tau: 0.005,
            gravity_mps2: 9.81,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.mass_kg) {
            return Err(Error::InvalidParameter("mass must be positive".into()));
        }
        if !self.inertia_diag_kgm2.iter().all(|&j| positive(j)) {
            return Err(Error::InvalidParameter("inertia diagonal must be positive".into()));
        }
        if !positive(self.arm_length_m) {
            return Err(Error::InvalidParameter("arm length must be positive".into()));
        }
        if !positive(self.c_tau) {
            return Err(Error::InvalidParameter("c_tau must be positive".into()));
        }
        if !positive(self.gravity_mps2) {
            return Err(Error::InvalidParameter("gravity must be positive".into()));
        }
        Ok(())
    }

    pub fn inertia(&self) -> Vector3<f64> {
        Vector3::from(self.inertia_diag_kgm2)
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass_kg * self.gravity_mps2
    }
}

/// Pose and twist of the airframe. Attitude maps body to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidBodyState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Matrix3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl RigidBodyState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self { position, velocity: Vector3::zeros(), attitude: Matrix3::identity(), angular_velocity: Vector3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.attitude.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }

    /// Largest entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.attitude.transpose() * self.attitude - Matrix3::identity()).amax()
    }
}

/// Additive wind force (world frame) and torque (body frame).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Disturbance {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Disturbance {
    pub fn force_only(force: Vector3<f64>) -> Self {
        Self { force, torque: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindDirection {
    None,
    LeftCrosswind,
    RightCrosswind,
    Headwind,
    Tailwind,
    Updraft,
    Downdraft,
}

impl WindDirection {
    pub const ALL: [WindDirection; 7] = [
        WindDirection::None,
        WindDirection::LeftCrosswind,
        WindDirection::RightCrosswind,
        WindDirection::Headwind,
        WindDirection::Tailwind,
        WindDirection::Updraft,
        WindDirection::Downdraft,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// World-frame unit vector the wind pushes along.
    pub fn unit(self) -> Vector3<f64> {
        match self {
            WindDirection::None => Vector3::zeros(),
            WindDirection::LeftCrosswind => Vector3::y(),
            WindDirection::RightCrosswind => -Vector3::y(),
            WindDirection::Headwind => -Vector3::x(),
            WindDirection::Tailwind => Vector3::x(),
            WindDirection::Updraft => Vector3::z(),
            WindDirection::Downdraft => -Vector3::z(),
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            WindDirection::None => "NW",
            WindDirection::LeftCrosswind => "LCW",
            WindDirection::RightCrosswind => "RCW",
            WindDirection::Headwind => "HW",
            WindDirection::Tailwind => "TW",
            WindDirection::Updraft => "UD",
            WindDirection::Downdraft => "DD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedLevel {
    None,
    Low,
    High,
}

impl SpeedLevel {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SpeedLevel::None),
            1 => Some(SpeedLevel::Low),
            2 => Some(SpeedLevel::High),
            _ => None,
        }
    }
}

/// A stationary wind regime: direction, speed and the disturbance it induces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindContext {
    pub direction: WindDirection,
    pub level: SpeedLevel,
    /// Mean world-frame force (N).
    pub mean_force: [f64; 3],
    /// Per-axis standard deviation of the turbulent force (N).
    pub turbulence_std: f64,
    /// Lever arm converting turbulent force into body torque (m).
    pub torque_arm_m: f64,
}

impl WindContext {
    pub fn new(
        direction: WindDirection,
        level: SpeedLevel,
        magnitude_n: f64,
        turbulence_std: f64,
        torque_arm_m: f64,
    ) -> Result<Self> {
        let invalid = || Error::InvalidContext { direction: direction.code(), level: level.code() };
        if (direction == WindDirection::None) != (level == SpeedLevel::None) {
            return Err(invalid());
        }
        if !(magnitude_n.is_finite() && turbulence_std.is_finite() && torque_arm_m.is_finite())
            || turbulence_std < 0.0
            || torque_arm_m < 0.0
        {
            return Err(Error::InvalidParameter("wind magnitudes must be finite and non-negative".into()));
        }
        if level == SpeedLevel::None && magnitude_n != 0.0 {
            return Err(invalid());
        }
        if level != SpeedLevel::None && magnitude_n <= 0.0 {
            return Err(invalid());
        }
        let mean = direction.unit() * magnitude_n;
        Ok(Self { direction, level, mean_force: [mean.x, mean.y, mean.z], turbulence_std, torque_arm_m })
    }

    pub fn calm(turbulence_std: f64, torque_arm_m: f64) -> Self {
        Self::new(WindDirection::None, SpeedLevel::None, 0.0, turbulence_std, torque_arm_m)
            .expect("calm context is always valid")
    }

    pub fn mean_force(&self) -> Vector3<f64> {
        Vector3::from(self.mean_force)
    }

    pub fn codes(&self) -> (u8, u8) {
        (self.direction.code(), self.level.code())
    }

    pub fn label(&self) -> String {
        match self.level {
            SpeedLevel::None => "NW".to_string(),
            SpeedLevel::Low => format!("{}-L", self.direction.abbreviation()),
            SpeedLevel::High => format!("{}-H", self.direction.abbreviation()),
        }
    }
}

/// JSON-facing description of one context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub direction: WindDirection,
    pub level: SpeedLevel,
    pub mean_force_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindConfig {
    pub contexts: Vec<ContextSpec>,
    pub turbulence_std_n: f64,
    pub torque_arm_m: f64,
}

impl Default for WindConfig {
    fn default() -> Self {
        let low = 0.08;
        let high = 0.16;
        let mut contexts =
            vec![ContextSpec { direction: WindDirection::None, level: SpeedLevel::None, mean_force_n: 0.0 }];
        for &direction in &WindDirection::ALL[1..] {
            for (level, force) in [(SpeedLevel::Low, low), (SpeedLevel::High, high)] {
                contexts.push(ContextSpec { direction, level, mean_force_n: force });
            }
        }
        Self { contexts, turbulence_std_n: 0.01, torque_arm_m: 1e-3 }
    }
}

impl WindConfig {
    /// The 13-context pool in lexicographic (direction, level) order.
    pub fn pool(&self) -> Result<Vec<WindContext>> {
        let mut pool = self
            .contexts
            .iter()
            .map(|c| WindContext::new(c.direction, c.level, c.mean_force_n, self.turbulence_std_n, self.torque_arm_m))
            .collect::<Result<Vec<_>>>()?;
        pool.sort_by_key(|c| c.codes());
        let distinct = pool.windows(2).all(|w| w[0].codes() != w[1].codes());
        if pool.len() != 13 || !distinct {
            return Err(Error::Config(format!(
                "wind pool must hold the 13 distinct contexts, found {} entries",
                pool.len()
            )));
        }
        Ok(pool)
    }
}

/// Position and velocity reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub y: Vector6<f64>,
    pub timestamp: f64,
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Nearest rotation matrix (polar factor).
pub fn reorthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Force-moment map of the motor layout: `(f, M₁, M₂, M₃) = A · thrusts`.
pub fn mixing_matrix(params: &QuadParams) -> nalgebra::Matrix4<f64> {
    let d = params.arm_length_m;
    let c = params.c_tau;
    nalgebra::Matrix4::new(
        1.0, 1.0, 1.0, 1.0, //
        0.0, -d, 0.0, d, //
        d, 0.0, -d, 0.0, //
        -c, c, -c, c,
    )
}

struct Derivative {
    velocity: Vector3<f64>,
    acceleration: Vector3<f64>,
    angular_acceleration: Vector3<f64>,
}

/// Advances the plant one step with RK4; the attitude stages move along the
/// SO(3) exponential map and the result is re-projected onto SO(3).
pub fn step_dynamics(
    state: &RigidBodyState,
    motor_thrusts: &Vector4<f64>,
    disturbance: &Disturbance,
    params: &QuadParams,
    dt: f64,
) -> Result<RigidBodyState> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::InvalidParameter(format!("dt must lie in (0, 0.1], got {dt}")));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("rigid-body state"));
    }
    if motor_thrusts.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidParameter("motor thrusts must be finite and non-negative".into()));
    }
    if disturbance.force.iter().chain(disturbance.torque.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("disturbance"));
    }

    let wrench = mixing_matrix(params) * motor_thrusts;
    let thrust = wrench[0];
    let moment = Vector3::new(wrench[1], wrench[2], wrench[3]);
    let m = params.mass_kg;
    let inertia = params.inertia();
    let gravity = Vector3::new(0.0, 0.0, -params.gravity_mps2);

    let derivative = |v: &Vector3<f64>, r: &Matrix3<f64>, w: &Vector3<f64>| {
        let jw = inertia.component_mul(w);
        Derivative {
            velocity: *v,
            acceleration: gravity + r.column(2) * (thrust / m) + disturbance.force / m,
            angular_acceleration: (moment - w.cross(&jw) + disturbance.torque).component_div(&inertia),
        }
    };
    let rotate = |r: &Matrix3<f64>, w: &Vector3<f64>, h: f64| r * Rotation3::new(w * h).into_inner();

    let (p0, v0, r0, w0) = (state.position, state.velocity, state.attitude, state.angular_velocity);
    let h = dt;

    let k1 = derivative(&v0, &r0, &w0);
    let w1 = w0;

    let v2 = v0 + k1.acceleration * (h / 2.0);
    let w2 = w0 + k1.angular_acceleration * (h / 2.0);
    let r2 = rotate(&r0, &w1, h / 2.0);
    let k2 = derivative(&v2, &r2, &w2);

    let v3 = v0 + k2.acceleration * (h / 2.0);
    let w3 = w0 + k2.angular_acceleration * (h / 2.0);
    let r3 = rotate(&r0, &w2, h / 2.0);
    let k3 = derivative(&v3, &r3, &w3);

    let v4 = v0 + k3.acceleration * h;
    let w4 = w0 + k3.angular_acceleration * h;
    let r4 = rotate(&r0, &w3, h);
    let k4 = derivative(&v4, &r4, &w4);

    let sixth = h / 6.0;
    let position = p0 + (k1.velocity + k2.velocity * 2.0 + k3.velocity * 2.0 + k4.velocity) * sixth;
    let velocity = v0 + (k1.acceleration + k2.acceleration * 2.0 + k3.acceleration * 2.0 + k4.acceleration) * sixth;
    let angular_velocity = w0
        + (k1.angular_acceleration
            + k2.angular_acceleration * 2.0
            + k3.angular_acceleration * 2.0
            + k4.angular_acceleration)
            * sixth;
    let mean_rate = (w1 + w2 * 2.0 + w3 * 2.0 + w4) / 6.0;
    let attitude = if mean_rate.iter().all(|&w| w == 0.0) { r0 } else { reorthonormalize(&rotate(&r0, &mean_rate, h)) };

    let next = RigidBodyState { position, velocity, attitude, angular_velocity };
    if !next.is_finite() {
        return Err(Error::NonFinite("integrated state"));
    }
    Ok(next)
}

/// Samples `y = (p, v) + ε` with `ε ~ N(0, diag(noise_std²))`.
pub fn measure(state: &RigidBodyState, time: f64, noise_std: &Vector6<f64>, rng_seed: u64) -> Result<Measurement> {
    if noise_std.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidParameter("noise std must be finite and non-negative".into()));
    }
    if !state.position.iter().chain(state.velocity.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("measured state"));
    }
    let mut rng = seed::rng(rng_seed, &[seed::tag::SENSOR]);
    let mut y = Vector6::zeros();
    y.fixed_rows_mut::<3>(0).copy_from(&state.position);
    y.fixed_rows_mut::<3>(3).copy_from(&state.velocity);
    for (yi, &s) in y.iter_mut().zip(noise_std.iter()) {
        let e: f64 = StandardNormal.sample(&mut rng);
        *yi += s * e;
    }
    Ok(Measurement { y, timestamp: time })
}

/// Stationary wind sample for a context: mean force plus seeded turbulence,
/// and a turbulent body torque scaled by the context's lever arm.
pub fn wind_disturbance(ctx: &WindContext, time: f64, rng_seed: u64) -> Result<Disturbance> {
    WindContext::new(ctx.direction, ctx.level, ctx.mean_force().norm(), ctx.turbulence_std, ctx.torque_arm_m)?;
    let mut rng = seed::rng(rng_seed, &[seed::tag::WIND, time.to_bits()]);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let turbulence = Vector3::new(draw(), draw(), draw()) * ctx.turbulence_std;
    let torque = Vector3::new(draw(), draw(), draw()) * (ctx.turbulence_std * ctx.torque_arm_m);
    Ok(Disturbance { force: ctx.mean_force() + turbulence, torque })
}
