//! Closed-loop evaluation of the four controllers and the experiment suite.

pub mod config;
pub mod learner;
pub mod record;
pub mod stats;
pub mod store;
pub mod suite;

use serde::{Deserialize, Serialize};

pub use config::ExperimentConfig;
pub use record::{RunMetadata, RunRecord, RunRow};

use crate::control::ReferencePoint;
use crate::dynamics::{RigidBodyState, WindContext};
use crate::environment::ContextMap;
use crate::error::{Error, Result};
use crate::network::WeightNet;
use crate::selection::PerformanceTable;
use crate::sim::{ClosedLoop, EstimatorKind, SimConfig, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Base,
    One,
    Budget,
    Full,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] =
        [ControllerKind::Base, ControllerKind::One, ControllerKind::Budget, ControllerKind::Full];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Base => "base",
            ControllerKind::One => "one",
            ControllerKind::Budget => "budget",
            ControllerKind::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown controller '{s}'")))
    }
}

/// Trained networks with their evaluation table; `nets[i]` belongs to
/// `table.rows[i]`.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub table: PerformanceTable,
    pub nets: Vec<WeightNet>,
}

impl ModelSet {
    pub fn new(table: PerformanceTable, nets: Vec<WeightNet>) -> Result<Self> {
        if table.rows.len() != nets.len() {
            return Err(Error::LengthMismatch { expected: table.rows.len(), got: nets.len() });
        }
        if nets.is_empty() {
            return Err(Error::MissingModel("model set is empty".into()));
        }
        Ok(Self { table, nets })
    }

    /// The single model with the best mean loss over the pool.
    pub fn best_mean(&self) -> Result<(String, &WeightNet)> {
        let i = self.table.best_mean_row()?;
        Ok((self.table.rows[i].model.clone(), &self.nets[i]))
    }
}

pub enum Controller<'a> {
    /// EKF with the disturbance-unaware controller.
    Base,
    /// One network everywhere.
    Fixed { id: String, net: &'a WeightNet },
    /// Network chosen per active context from a model set.
    Contextual(&'a ModelSet),
}

/// APE series with its RMSE and maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ape: Vec<f64>,
    pub rmse_ape_m: f64,
    pub max_ape_m: f64,
}

/// `APE_t = ‖p_t − p_ref,t‖`, `RMSE = √mean(APE²)`, `max = max APE`.
pub fn compute_metrics(positions: &[[f64; 3]], setpoints: &[[f64; 3]]) -> Result<Metrics> {
    if positions.len() != setpoints.len() {
        return Err(Error::LengthMismatch { expected: setpoints.len(), got: positions.len() });
    }
    if positions.is_empty() {
        return Err(Error::InvalidParameter("empty record".into()));
    }
    let ape: Vec<f64> = positions
        .iter()
        .zip(setpoints)
        .map(|(p, s)| ((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2)).sqrt())
        .collect();
    let rmse = (ape.iter().map(|a| a * a).sum::<f64>() / ape.len() as f64).sqrt();
    let max = ape.iter().copied().fold(0.0, f64::max);
    Ok(Metrics { ape, rmse_ape_m: rmse, max_ape_m: max })
}

/// Where an episode runs and how it is labelled in its record.
pub struct Scenario<'a> {
    pub map: &'a dyn ContextMap,
    pub pool: &'a [WindContext],
    /// Pool index flown where the map reports calm air.
    pub calm: usize,
    pub references: &'a [ReferencePoint],
}

/// Flies one episode. Numerical failure ends the episode early; the partial
/// record carries the reason.
pub fn run_episode(
    controller: &Controller,
    scenario: &Scenario,
    sim: &SimConfig,
    seed: u64,
    meta: RunMetadata,
) -> Result<RunRecord> {
    run_episode_observed(controller, scenario, sim, seed, meta, &mut |_| Ok(()))
}

/// [`run_episode`] with `observer` called after every completed step.
pub fn run_episode_observed(
    controller: &Controller,
    scenario: &Scenario,
    sim: &SimConfig,
    seed: u64,
    mut meta: RunMetadata,
    observer: &mut dyn FnMut(&StepOutput) -> Result<()>,
) -> Result<RunRecord> {
    let kind = match controller {
        Controller::Base => EstimatorKind::Ekf,
        _ => EstimatorKind::Mhe,
    };
    let refs = scenario.references;
    let first = refs.first().ok_or_else(|| Error::InvalidParameter("empty reference stream".into()))?;
    let mut lp = ClosedLoop::new(sim, kind, RigidBodyState::at_rest(first.position), seed)?;
    let mut rows = Vec::with_capacity(refs.len());
    let mut current: Option<(usize, usize)> = None;
    for r in refs {
        let active = scenario.map.context_at(&lp.plant().position).unwrap_or(scenario.calm);
        let (model_id, net) = match controller {
            Controller::Base => (String::new(), None),
            Controller::Fixed { id, net } => (id.clone(), Some(*net)),
            Controller::Contextual(set) => {
                let row = match current {
                    Some((ctx, row)) if ctx == active => row,
                    _ => {
                        let row = set.table.best_for(active)?;
                        current = Some((active, row));
                        row
                    }
                };
                (set.table.rows[row].model.clone(), Some(&set.nets[row]))
            }
        };
        match lp.step(r, &scenario.pool[active], net) {
            Ok(out) => {
                observer(&out)?;
                let theta = out.mhe.as_ref().map(|m| m.weights.to_theta());
                rows.push(RunRow::from_step(&out, r, scenario.pool[active].label(), model_id, theta));
            }
            Err(e @ (Error::Diverged { .. } | Error::NonFinite(_) | Error::DegenerateReference)) => {
                log::warn!("episode aborted at step {}: {e}", lp.step_index());
                meta.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    RunRecord::new(meta, rows)
}
