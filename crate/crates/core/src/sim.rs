//! Closed-loop stack: sensor, estimator, Lee controller, mixer, wind, plant.

use nalgebra::{Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::control::{lee_control, ControlGains, MotorLimits, MotorMixer, ReferencePoint, ThrustMoment};
use crate::dynamics::{
    measure, step_dynamics, wind_disturbance, Disturbance, Measurement, QuadParams, RigidBodyState, WindContext,
};
use crate::error::{Error, Result};
use crate::mhe::{
    ekf_estimate, ekf_update, slide_window, solve_mhe_with, AugmentedState, EkfNoise, HorizonWindow, MheSolution,
    MheWeights, SolverOptions, StateMatrix, TranslationalModel,
};
use crate::network::{Features, ForwardCache, RawOutput, ThetaMapping, WeightNet};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Velocity innovation against the one-step prediction, and the latest
    /// velocity estimate.
    InnovationVelocity,
    /// Measured position and velocity.
    PositionVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub first_scale: f64,
    pub second_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { kind: FeatureKind::InnovationVelocity, first_scale: 10.0, second_scale: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub params: QuadParams,
    pub gains: ControlGains,
    pub limits: MotorLimits,
    pub rate_hz: f64,
    pub horizon: usize,
    /// Sensor noise std for `(p, v)`.
    pub sensor_noise_std: [f64; 6],
    pub ekf: EkfNoise,
    pub ekf_initial_std: [f64; 9],
    pub features: FeatureConfig,
    pub solver: SolverOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            params: QuadParams::default(),
            gains: ControlGains::default(),
            limits: MotorLimits::default(),
            rate_hz: 50.0,
            horizon: 10,
            sensor_noise_std: [3e-3, 3e-3, 3e-3, 3e-2, 3e-2, 3e-2],
            ekf: EkfNoise::default(),
            ekf_initial_std: [1e-2, 1e-2, 1e-2, 5e-2, 5e-2, 5e-2, 5e-2, 5e-2, 5e-2],
            features: FeatureConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn model(&self) -> TranslationalModel {
        TranslationalModel { dt: self.dt(), mass_kg: self.params.mass_kg, gravity_mps2: self.params.gravity_mps2 }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.gains.validate()?;
        self.model().validate()?;
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least one step".into()));
        }
        if !(self.limits.max_n > self.limits.min_n) {
            return Err(Error::InvalidParameter("motor limits are empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ekf,
    Mhe,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum EstimatorState {
    Ekf(Option<(AugmentedState, StateMatrix)>),
    Mhe(Option<(HorizonWindow, MheSolution)>),
}

/// Everything the estimator did on an MHE step, kept for training.
#[derive(Debug, Clone)]
pub struct MheStep {
    pub features: Features,
    pub raw: RawOutput,
    pub cache: ForwardCache,
    pub weights: MheWeights,
    pub window: HorizonWindow,
    pub solution: MheSolution,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub step: usize,
    pub time: f64,
    /// Plant state when the measurement was taken.
    pub truth: RigidBodyState,
    pub measurement: Measurement,
    pub estimate: AugmentedState,
    /// Commanded `(f, M)` after motor saturation.
    pub control: ThrustMoment,
    pub thrusts: Vector4<f64>,
    pub disturbance: Disturbance,
    pub mhe: Option<MheStep>,
}

pub struct ClosedLoop {
    cfg: SimConfig,
    model: TranslationalModel,
    mixer: MotorMixer,
    mapping: ThetaMapping,
    noise_std: Vector6<f64>,
    seed: u64,
    plant: RigidBodyState,
    estimator: EstimatorState,
    last_estimate: Option<AugmentedState>,
    last_input: Vector3<f64>,
    step: usize,
}

impl ClosedLoop {
    pub fn new(cfg: &SimConfig, kind: EstimatorKind, initial: RigidBodyState, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let estimator = match kind {
            EstimatorKind::Ekf => EstimatorState::Ekf(None),
            EstimatorKind::Mhe => EstimatorState::Mhe(None),
        };
        Ok(Self {
            cfg: *cfg,
            model: cfg.model(),
            mixer: MotorMixer::new(&cfg.params)?,
            mapping: ThetaMapping::default(),
            noise_std: Vector6::from(cfg.sensor_noise_std),
            seed: run_seed,
            plant: initial,
            estimator,
            last_estimate: None,
            last_input: Vector3::zeros(),
            step: 0,
        })
    }

    pub fn plant(&self) -> &RigidBodyState {
        &self.plant
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn features(&self, y: &Vector6<f64>) -> Features {
        let fc = &self.cfg.features;
        let mut f = [0.0; 6];
        match fc.kind {
            FeatureKind::InnovationVelocity => {
                let (innovation, velocity) = match &self.last_estimate {
                    Some(prev) => {
                        let pred = self.model.predict(&prev.0, &self.last_input);
                        (y.fixed_rows::<3>(3) - pred.fixed_rows::<3>(3), prev.velocity())
                    }
                    None => (Vector3::zeros(), y.fixed_rows::<3>(3).into_owned()),
                };
                for i in 0..3 {
                    f[i] = innovation[i] * fc.first_scale;
                    f[i + 3] = velocity[i] * fc.second_scale;
                }
            }
            FeatureKind::PositionVelocity => {
                for i in 0..3 {
                    f[i] = y[i] * fc.first_scale;
                    f[i + 3] = y[i + 3] * fc.second_scale;
                }
            }
        }
        f
    }

    fn estimate_mhe(&mut self, y: &Vector6<f64>, net: &WeightNet) -> Result<MheStep> {
        let features = self.features(y);
        let (raw, cache) = net.forward_raw(&features);
        let weights = self.mapping.map(&raw);
        let window = match &self.estimator {
            EstimatorState::Mhe(Some((window, solution))) => slide_window(window, *y, self.last_input, solution),
            _ => {
                let prior =
                    AugmentedState::new(y.fixed_rows::<3>(0).into(), y.fixed_rows::<3>(3).into(), Vector3::zeros());
                HorizonWindow::start(self.model, self.cfg.horizon, *y, prior)
            }
        };
        let solution = solve_mhe_with(&window, &weights, &self.cfg.solver)?;
        self.estimator = EstimatorState::Mhe(Some((window.clone(), solution.clone())));
        Ok(MheStep { features, raw, cache, weights, window, solution })
    }

    fn estimate_ekf(&mut self, measurement: &Measurement) -> Result<AugmentedState> {
        let noise = &self.cfg.ekf;
        let (x, p) = match &self.estimator {
            EstimatorState::Ekf(Some((x, p))) => ekf_estimate(x, p, &self.last_input, measurement, &self.model, noise)?,
            _ => {
                let y = &measurement.y;
                let prior =
                    AugmentedState::new(y.fixed_rows::<3>(0).into(), y.fixed_rows::<3>(3).into(), Vector3::zeros());
                let p0 = StateMatrix::from_diagonal(&nalgebra::SVector::from(self.cfg.ekf_initial_std).map(|s| s * s));
                ekf_update(&prior, &p0, y, noise)?
            }
        };
        self.estimator = EstimatorState::Ekf(Some((x, p)));
        Ok(x)
    }

    /// Advances one control period. `net` supplies the MHE weights and is
    /// required for the MHE estimator; the EKF path ignores it and flies the
    /// disturbance-unaware controller.
    pub fn step(
        &mut self,
        reference: &ReferencePoint,
        wind: &WindContext,
        net: Option<&WeightNet>,
    ) -> Result<StepOutput> {
        let dt = self.cfg.dt();
        let time = self.step as f64 * dt;
        let measurement = measure(&self.plant, time, &self.noise_std, seed::derive(self.seed, &[self.step as u64]))?;

        let (estimate, mhe, aware) = match self.estimator {
            EstimatorState::Mhe(_) => {
                let net = net.ok_or_else(|| Error::MissingModel("MHE estimator needs a weight network".into()))?;
                let s = self.estimate_mhe(&measurement.y, net)?;
                (*s.solution.latest(), Some(s), true)
            }
            EstimatorState::Ekf(_) => (self.estimate_ekf(&measurement)?, None, false),
        };
        if !estimate.is_finite() {
            return Err(Error::Diverged { step: self.step, reason: "non-finite estimate".into() });
        }

        let control_state = RigidBodyState {
            position: estimate.position(),
            velocity: estimate.velocity(),
            attitude: self.plant.attitude,
            angular_velocity: self.plant.angular_velocity,
        };
        let dist_estimate = if aware { Disturbance::force_only(estimate.force()) } else { Disturbance::default() };
        let commanded = lee_control(&control_state, reference, &self.cfg.gains, &self.cfg.params, &dist_estimate)?;
        let thrusts = self.cfg.limits.saturate(&self.mixer.mix(&commanded));
        let control = self.mixer.unmix(&thrusts);

        let disturbance = wind_disturbance(wind, time, self.seed)?;
        let truth = self.plant;
        self.plant = step_dynamics(&self.plant, &thrusts, &disturbance, &self.cfg.params, dt)?;
        if !self.plant.is_finite() {
            return Err(Error::Diverged { step: self.step, reason: "non-finite plant state".into() });
        }

        self.last_input = truth.attitude * Vector3::z() * (control.thrust / self.cfg.params.mass_kg);
        self.last_estimate = Some(estimate);
        let out =
            StepOutput { step: self.step, time, truth, measurement, estimate, control, thrusts, disturbance, mhe };
        self.step += 1;
        Ok(out)
    }
}
