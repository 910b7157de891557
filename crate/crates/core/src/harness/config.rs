use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlGains, MotorLimits};
use crate::dynamics::{QuadParams, WindConfig, WindContext};
use crate::environment::{Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::mhe::{EkfNoise, SolverOptions};
use crate::selection::{context_point, ContextPoint, SelectionConfig};
use crate::sim::{FeatureConfig, SimConfig};
use crate::training::TrainConfig;
use crate::trajectory::TrajectoryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    #[serde(flatten)]
    pub gains: ControlGains,
    #[serde(flatten)]
    pub motors: MotorLimits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub rate_hz: f64,
    pub horizon: usize,
    pub sensor_noise_std: [f64; 6],
    pub ekf: EkfNoise,
    pub ekf_initial_std: [f64; 9],
    pub features: FeatureConfig,
    pub solver: SolverOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            rate_hz: s.rate_hz,
            horizon: s.horizon,
            sensor_noise_std: s.sensor_noise_std,
            ekf: s.ekf,
            ekf_initial_std: s.ekf_initial_std,
            features: s.features,
            solver: s.solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentConfig {
    pub volume_m: [f64; 3],
    pub margin_m: f64,
    pub layouts: Vec<EnvironmentSpec>,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self { volume_m: [1.5, 1.5, 1.0], margin_m: 0.0, layouts: EnvironmentSpec::defaults() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub base_seed: u64,
    pub seeds: usize,
    pub budget: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { base_seed: 2024, seeds: 5, budget: 3 }
    }
}

/// Everything a run depends on. Two runs with equal configs and seeds
/// produce identical outputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub params: QuadParams,
    pub wind: WindConfig,
    pub control: ControlConfig,
    pub estimator: EstimatorConfig,
    pub training: TrainConfig,
    pub selection: SelectionConfig,
    pub environments: EnvironmentConfig,
    pub trajectory: TrajectoryConfig,
    pub suite: SuiteConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim().validate()?;
        self.training.validate()?;
        self.pool()?;
        self.environments()?;
        if self.suite.seeds == 0 {
            return Err(Error::Config("suite needs at least one seed".into()));
        }
        if self.trajectory.rate_hz != self.estimator.rate_hz {
            return Err(Error::Config("trajectory and estimator rates differ".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn sim(&self) -> SimConfig {
        let e = &self.estimator;
        SimConfig {
            params: self.params,
            gains: self.control.gains,
            limits: self.control.motors,
            rate_hz: e.rate_hz,
            horizon: e.horizon,
            sensor_noise_std: e.sensor_noise_std,
            ekf: e.ekf,
            ekf_initial_std: e.ekf_initial_std,
            features: e.features,
            solver: e.solver,
        }
    }

    pub fn pool(&self) -> Result<Vec<WindContext>> {
        self.wind.pool()
    }

    pub fn labels(&self) -> Result<Vec<String>> {
        Ok(self.pool()?.iter().map(|c| c.label()).collect())
    }

    pub fn points(&self) -> Result<Vec<ContextPoint>> {
        Ok(self.pool()?.iter().map(context_point).collect())
    }

    pub fn volume(&self) -> Vector3<f64> {
        Vector3::from(self.environments.volume_m)
    }

    pub fn environments(&self) -> Result<Vec<Environment>> {
        let pool = self.pool()?;
        self.environments
            .layouts
            .iter()
            .map(|s| Environment::resolve(s, &pool, self.volume(), self.environments.margin_m))
            .collect()
    }

    pub fn environment(&self, id: u8) -> Result<Environment> {
        self.environments()?
            .into_iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Config(format!("no environment with id {id}")))
    }

    /// Pool index of a context given by label (`HW-L`) or index.
    pub fn context_index(&self, id: &str) -> Result<usize> {
        let labels = self.labels()?;
        if let Some(i) = labels.iter().position(|l| l.eq_ignore_ascii_case(id)) {
            return Ok(i);
        }
        match id.parse::<usize>() {
            Ok(i) if i < labels.len() => Ok(i),
            _ => Err(Error::Config(format!("unknown context '{id}'; expected one of {}", labels.join(", ")))),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.suite.seeds as u64).map(|i| self.suite.base_seed + i).collect()
    }
}
