//! End-to-end training of the weight network through the MHE.

use nalgebra::{SVector, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::control::ReferencePoint;
use crate::dynamics::{RigidBodyState, WindContext};
use crate::environment::{ContextMap, FlowBand};
use crate::error::{Error, Result};
use crate::mhe::{AugmentedState, MheWeights, StateMatrix, THETA_DIM};
use crate::network::{tracking_loss_gradient, Adam, AdamConfig, RawOutput, ThetaMapping, WeightNet, PARAM_COUNT};
use crate::seed;
use crate::sensitivity::solution_sensitivity;
use crate::sim::{ClosedLoop, EstimatorKind, MheStep, SimConfig, StepOutput};
use crate::trajectory::line_pass;

/// Straight pass through a band of wind, used for both training and
/// per-context evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CourseConfig {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub speed_mps: f64,
    pub hold_s: f64,
    pub flow_x_min: f64,
    pub flow_x_max: f64,
}

impl Default for CourseConfig {
    fn default() -> Self {
        Self {
            start: [0.15, 0.75, 0.5],
            end: [1.35, 0.75, 0.5],
            speed_mps: 0.3,
            hold_s: 0.5,
            flow_x_min: 0.45,
            flow_x_max: 1.05,
        }
    }
}

impl CourseConfig {
    pub fn references(&self, rate_hz: f64) -> Vec<ReferencePoint> {
        line_pass(Vector3::from(self.start), Vector3::from(self.end), self.speed_mps, self.hold_s, rate_hz)
    }

    pub fn field(&self, context: usize) -> FlowBand {
        FlowBand { context, x_min: self.flow_x_min, x_max: self.flow_x_max }
    }
}

/// What the estimated window is compared against in the tracking loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReference {
    /// Commanded position and velocity, zero force.
    Command,
    /// Commanded position and velocity, true wind force.
    CommandForce,
    /// True position, velocity and wind force.
    #[default]
    Truth,
}

/// Reference and weighting of the tracking loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub reference: LossReference,
    /// Diagonal of the weight over `(p, v, F_dist)`.
    pub weight: [f64; 9],
    pub squared: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { reference: LossReference::Truth, weight: [1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0, 1.0, 1.0], squared: false }
    }
}

impl LossSpec {
    /// Tracking error against the commanded trajectory; the force block is
    /// unweighted since the command carries no force.
    pub fn command() -> Self {
        Self {
            reference: LossReference::Command,
            weight: [1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0],
            squared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.weight[..6].iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidParameter(
                "loss weight must be positive on (p, v) and non-negative on F_dist".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> StateMatrix {
        StateMatrix::from_diagonal(&SVector::from(self.weight))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub convergence_threshold: f64,
    pub max_episodes: usize,
    /// Loss minimized during training.
    pub loss: LossSpec,
    /// Loss reported for the performance table.
    pub eval_loss: LossSpec,
    /// Episodes averaged per table entry.
    pub eval_episodes: usize,
    pub init_scale: f64,
    /// MHE weights the untrained network emits, via the output bias.
    pub initial_theta: [f64; THETA_DIM],
    pub course: CourseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut initial_theta = [0.0; THETA_DIM];
        let groups: [(std::ops::Range<usize>, f64); 7] =
            [(0..3, 4.0), (3..9, 1.0), (9..12, 1.0), (12..15, 0.01), (15..18, 9.0), (18..21, 0.25), (21..24, 0.1)];
        for (range, v) in groups {
            initial_theta[range].fill(v);
        }
        initial_theta[24] = 0.95;
        Self {
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            convergence_threshold: 1e-3,
            max_episodes: 10,
            loss: LossSpec::default(),
            eval_loss: LossSpec::command(),
            eval_episodes: 2,
            init_scale: 0.05,
            initial_theta,
            course: CourseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.learning_rate > 0.0)
            || !(self.convergence_threshold > 0.0)
            || self.max_episodes == 0
            || self.eval_episodes == 0
        {
            return Err(Error::InvalidParameter("learning rate, threshold and episode counts must be positive".into()));
        }
        self.loss.validate()?;
        self.eval_loss.validate()?;
        MheWeights::from_theta(&self.initial_theta)?.validate()
    }

    pub fn initial_network(&self, seed_value: u64) -> Result<WeightNet> {
        let bias = ThetaMapping::default().inverse(&MheWeights::from_theta(&self.initial_theta)?)?;
        Ok(WeightNet::initialize(seed_value, self.init_scale, &bias))
    }
}

/// The calm context of the pool, `(0, 0)`.
pub fn calm_index(pool: &[WindContext]) -> Result<usize> {
    pool.iter().position(|c| c.codes() == (0, 0)).ok_or(Error::InvalidContext { direction: 0, level: 0 })
}

/// Per-window loss and its gradient with respect to θ.
pub fn window_loss_gradient(
    step: &MheStep,
    reference: &[AugmentedState],
    w: &StateMatrix,
    squared: bool,
) -> Result<(f64, [f64; THETA_DIM])> {
    let (loss, grads) = tracking_loss_gradient(&step.solution.states, reference, w, squared)?;
    let sens = solution_sensitivity(&step.window, &step.weights, &step.solution)?;
    let mut d_theta = SVector::<f64, THETA_DIM>::zeros();
    for (x, g) in sens.iter().zip(&grads) {
        d_theta += x.transpose() * g;
    }
    Ok((loss, d_theta.into()))
}

/// Chain rule through the positivity map and the network.
pub fn network_gradient(net: &WeightNet, step: &MheStep, d_theta: &[f64; THETA_DIM]) -> Vec<f64> {
    let d_map = ThetaMapping::default().derivative(&step.raw);
    let d_raw: RawOutput = std::array::from_fn(|i| d_theta[i] * d_map[i]);
    net.backward(&step.cache, &d_raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped_updates: usize,
}

fn reference_state(kind: LossReference, r: &ReferencePoint, out: &StepOutput) -> AugmentedState {
    match kind {
        LossReference::Command => AugmentedState::new(r.position, r.velocity, Vector3::zeros()),
        LossReference::CommandForce => AugmentedState::new(r.position, r.velocity, out.disturbance.force),
        LossReference::Truth => AugmentedState::new(out.truth.position, out.truth.velocity, out.disturbance.force),
    }
}

/// Flies the course in `context` with the MHE estimator. With `adam`, one
/// update is applied per step; otherwise the network is only evaluated.
#[allow(clippy::too_many_arguments)]
pub fn run_course(
    net: &mut WeightNet,
    mut adam: Option<&mut Adam>,
    context: usize,
    pool: &[WindContext],
    cfg: &TrainConfig,
    loss: &LossSpec,
    sim: &SimConfig,
    episode_seed: u64,
) -> Result<EpisodeStats> {
    let refs = cfg.course.references(sim.rate_hz);
    let field = cfg.course.field(context);
    let calm = calm_index(pool)?;
    let w = loss.matrix();
    let start = RigidBodyState::at_rest(refs[0].position);
    let mut lp = ClosedLoop::new(sim, EstimatorKind::Mhe, start, episode_seed)?;
    let mut history: Vec<AugmentedState> = Vec::with_capacity(refs.len());
    let mut total = 0.0;
    let mut skipped = 0;
    for r in &refs {
        let active = field.context_at(&lp.plant().position).unwrap_or(calm);
        let out = lp.step(r, &pool[active], Some(net))?;
        history.push(reference_state(loss.reference, r, &out));
        let mhe = out.mhe.as_ref().expect("MHE estimator");
        let window_refs = &history[history.len() - mhe.solution.states.len()..];
        if !mhe.solution.converged {
            skipped += 1;
            total += tracking_loss_gradient(&mhe.solution.states, window_refs, &w, loss.squared)?.0;
            continue;
        }
        match adam.as_deref_mut() {
            Some(opt) => match window_loss_gradient(mhe, window_refs, &w, loss.squared) {
                Ok((loss, d_theta)) => {
                    total += loss;
                    let grad = network_gradient(net, mhe, &d_theta);
                    opt.step(net, &grad);
                }
                Err(Error::IllConditioned { .. }) => {
                    skipped += 1;
                    total += tracking_loss_gradient(&mhe.solution.states, window_refs, &w, loss.squared)?.0;
                }
                Err(e) => return Err(e),
            },
            None => total += tracking_loss_gradient(&mhe.solution.states, window_refs, &w, loss.squared)?.0,
        }
    }
    Ok(EpisodeStats { mean_loss: total / refs.len() as f64, steps: refs.len(), skipped_updates: skipped })
}

pub fn train_episode(
    net: &mut WeightNet,
    adam: &mut Adam,
    context: usize,
    pool: &[WindContext],
    cfg: &TrainConfig,
    sim: &SimConfig,
    episode_seed: u64,
) -> Result<EpisodeStats> {
    run_course(net, Some(adam), context, pool, cfg, &cfg.loss, sim, episode_seed)
}

/// Mean per-step evaluation loss of a fixed network on the course,
/// averaged over `eval_episodes` episodes derived from `episode_seed`.
pub fn evaluate_loss(
    net: &WeightNet,
    context: usize,
    pool: &[WindContext],
    cfg: &TrainConfig,
    sim: &SimConfig,
    episode_seed: u64,
) -> Result<f64> {
    let mut copy = net.clone();
    let mut total = 0.0;
    for i in 0..cfg.eval_episodes {
        let s = if i == 0 { episode_seed } else { seed::derive(episode_seed, &[i as u64]) };
        total += run_course(&mut copy, None, context, pool, cfg, &cfg.eval_loss, sim, s)?.mean_loss;
    }
    Ok(total / cfg.eval_episodes as f64)
}

/// `|L(e) − L(e−1)| < threshold`; the first episode converges only for an
/// infinite threshold.
pub fn has_converged(history: &[f64], threshold: f64) -> bool {
    match history {
        [] => false,
        [_] => threshold.is_infinite(),
        [.., prev, last] => (last - prev).abs() < threshold,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: WeightNet,
    pub loss_history: Vec<f64>,
    pub converged: bool,
    pub skipped_updates: usize,
}

pub fn train_to_convergence(
    net: WeightNet,
    context: usize,
    pool: &[WindContext],
    cfg: &TrainConfig,
    sim: &SimConfig,
    run_seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = net;
    let mut adam = Adam::new(cfg.adam);
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut converged = false;
    for episode in 0..cfg.max_episodes {
        let episode_seed = seed::derive(run_seed, &[seed::tag::TRAIN_EPISODE, context as u64, episode as u64]);
        let stats = train_episode(&mut net, &mut adam, context, pool, cfg, sim, episode_seed)?;
        log::debug!("context {} episode {episode}: loss {:.6}", pool[context].label(), stats.mean_loss);
        history.push(stats.mean_loss);
        skipped += stats.skipped_updates;
        if has_converged(&history, cfg.convergence_threshold) {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome { net, loss_history: history, converged, skipped_updates: skipped })
}

/// Per-parameter comparison of the chain-rule gradient with finite
/// differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Recorded inputs of a short episode: for each step, the features, window
/// and reference the estimator saw.
struct FrozenStep {
    step: MheStep,
    reference: Vec<AugmentedState>,
}

fn frozen_loss(net: &WeightNet, frozen: &[FrozenStep], w: &StateMatrix, squared: bool) -> Result<f64> {
    let mapping = ThetaMapping::default();
    let mut total = 0.0;
    for f in frozen {
        let weights = net.forward(&f.step.features, &mapping);
        let sol = crate::mhe::solve_mhe(&f.step.window, &weights)?;
        total += tracking_loss_gradient(&sol.states, &f.reference, w, squared)?.0;
    }
    Ok(total)
}

/// Summed loss of a `steps`-long episode flown from scratch with `net`.
fn resimulated_loss(
    net: &WeightNet,
    context: usize,
    pool: &[WindContext],
    cfg: &TrainConfig,
    sim: &SimConfig,
    run_seed: u64,
    steps: usize,
) -> Result<f64> {
    let refs = cfg.course.references(sim.rate_hz);
    let field = cfg.course.field(context);
    let calm = calm_index(pool)?;
    let w = cfg.loss.matrix();
    let mut lp = ClosedLoop::new(sim, EstimatorKind::Mhe, RigidBodyState::at_rest(refs[0].position), run_seed)?;
    let mut history = Vec::new();
    let mut total = 0.0;
    for r in refs.iter().take(steps) {
        let active = field.context_at(&lp.plant().position).unwrap_or(calm);
        let out = lp.step(r, &pool[active], Some(net))?;
        history.push(reference_state(cfg.loss.reference, r, &out));
        let mhe = out.mhe.as_ref().expect("MHE estimator");
        let reference = &history[history.len() - mhe.solution.states.len()..];
        total += tracking_loss_gradient(&mhe.solution.states, reference, &w, cfg.loss.squared)?.0;
    }
    Ok(total)
}

/// How the finite-difference side of the end-to-end check is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMode {
    /// Windows, features and references recorded once and held fixed.
    Frozen,
    /// The closed loop re-flown for every perturbed network.
    Resimulated,
}

/// Chain-rule gradient of the summed loss of a `steps`-long episode against
/// central differences over `samples` random network parameters.
#[allow(clippy::too_many_arguments)]
pub fn end_to_end_gradcheck(
    context: usize,
    pool: &[WindContext],
    cfg: &TrainConfig,
    sim: &SimConfig,
    run_seed: u64,
    steps: usize,
    samples: usize,
    fd_step: f64,
    mode: FdMode,
) -> Result<Vec<ParameterCheck>> {
    let net = WeightNet::initialize(
        run_seed,
        0.3,
        &ThetaMapping::default().inverse(&MheWeights::from_theta(&cfg.initial_theta)?)?,
    );
    let refs = cfg.course.references(sim.rate_hz);
    let field = cfg.course.field(context);
    let calm = calm_index(pool)?;
    let w = cfg.loss.matrix();
    let mut lp = ClosedLoop::new(sim, EstimatorKind::Mhe, RigidBodyState::at_rest(refs[0].position), run_seed)?;
    let mut history = Vec::new();
    let mut frozen = Vec::new();
    let mut analytic = vec![0.0; PARAM_COUNT];
    for r in refs.iter().take(steps) {
        let active = field.context_at(&lp.plant().position).unwrap_or(calm);
        let out = lp.step(r, &pool[active], Some(&net))?;
        history.push(reference_state(cfg.loss.reference, r, &out));
        let mhe = out.mhe.expect("MHE estimator");
        let reference = history[history.len() - mhe.solution.states.len()..].to_vec();
        let (_, d_theta) = window_loss_gradient(&mhe, &reference, &w, cfg.loss.squared)?;
        for (a, g) in analytic.iter_mut().zip(network_gradient(&net, &mhe, &d_theta)) {
            *a += g;
        }
        frozen.push(FrozenStep { step: mhe, reference });
    }

    let mut rng = seed::rng(run_seed, &[0x9c]);
    let mut indices = sample(&mut rng, PARAM_COUNT, samples.min(PARAM_COUNT)).into_vec();
    indices.sort_unstable();
    let mut out = Vec::with_capacity(indices.len());
    for index in indices {
        let mut plus = net.clone();
        *plus.parameter_mut(index) += fd_step;
        let mut minus = net.clone();
        *minus.parameter_mut(index) -= fd_step;
        let loss = |n: &WeightNet| match mode {
            FdMode::Frozen => frozen_loss(n, &frozen, &w, cfg.loss.squared),
            FdMode::Resimulated => resimulated_loss(n, context, pool, cfg, sim, run_seed, steps),
        };
        let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * fd_step);
        let a = analytic[index];
        let scale = a.abs().max(numeric.abs()).max(1e-10);
        out.push(ParameterCheck { index, analytic: a, numeric, rel_err: (a - numeric).abs() / scale });
    }
    Ok(out)
}

/// `‖analytic − numeric‖ / ‖numeric‖` over a set of checks.
pub fn norm_relative_error(checks: &[ParameterCheck]) -> f64 {
    let diff: f64 = checks.iter().map(|c| (c.analytic - c.numeric).powi(2)).sum();
    let num: f64 = checks.iter().map(|c| c.numeric.powi(2)).sum();
    (diff / num.max(1e-300)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::WindConfig;

    fn pool() -> Vec<WindContext> {
        WindConfig::default().pool().unwrap()
    }

    #[test]
    fn convergence_rule() {
        assert!(!has_converged(&[], 1e-3));
        assert!(!has_converged(&[0.5], 1e-3));
        assert!(has_converged(&[0.5], f64::INFINITY));
        assert!(has_converged(&[0.5, 0.5005], 1e-3));
        assert!(!has_converged(&[0.5, 0.502], 1e-3));
    }

    #[test]
    fn initial_network_emits_the_configured_weights() {
        let cfg = TrainConfig::default();
        let mut zero_scale = cfg;
        zero_scale.init_scale = 1e-300;
        let net = zero_scale.initial_network(1).unwrap();
        let theta = net.forward(&[0.3; 6], &ThetaMapping::default()).to_theta();
        for (a, b) in theta.iter().zip(&cfg.initial_theta) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn infinite_threshold_stops_after_one_episode() {
        let pool = pool();
        let cfg = TrainConfig { convergence_threshold: f64::INFINITY, ..Default::default() };
        let sim = SimConfig::default();
        let out = train_to_convergence(cfg.initial_network(2).unwrap(), 0, &pool, &cfg, &sim, 2).unwrap();
        assert_eq!(out.loss_history.len(), 1);
        assert!(out.converged);
    }

    #[test]
    fn end_to_end_gradient_small() {
        let pool = pool();
        let cfg = TrainConfig::default();
        let sim = SimConfig::default();
        let frozen = end_to_end_gradcheck(7, &pool, &cfg, &sim, 4, 3, 20, 1e-6, FdMode::Frozen).unwrap();
        assert!(frozen.iter().all(|c| c.rel_err < 1e-4), "{frozen:?}");
        let resim = end_to_end_gradcheck(7, &pool, &cfg, &sim, 4, 3, 20, 1e-6, FdMode::Resimulated).unwrap();
        assert!(norm_relative_error(&resim) < 1e-2, "{resim:?}");
    }
}
