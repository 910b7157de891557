//! Choosing which contexts to train on under a budget, and which trained
//! model to fly in a given context.

pub mod gp;
pub mod table;

use serde::{Deserialize, Serialize};

pub use gp::{ContextPoint, GpConfig, GpModel};
pub use table::{PerformanceTable, TableRow};

use crate::dynamics::WindContext;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub beta: f64,
    /// Slope of the linear generalization gap in context distance.
    pub gap_slope: f64,
    /// Best-so-far performance assumed before any model exists.
    pub no_model_floor: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { beta: 1.0, gap_slope: 1e-3, no_model_floor: -1e3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub gp: GpConfig,
    pub acquisition: AcquisitionConfig,
}

pub fn context_point(ctx: &WindContext) -> ContextPoint {
    let (d, l) = ctx.codes();
    ContextPoint::new(d as f64, l as f64)
}

/// Expected improvement of a model trained at `candidate` over the current
/// per-context best, averaged uniformly over the pool and clipped at zero
/// per context. `composite_loss` is the table's best loss per context.
pub fn acquisition(
    candidate: &ContextPoint,
    gp: &GpModel,
    composite_loss: Option<&[f64]>,
    pool: &[ContextPoint],
    cfg: &AcquisitionConfig,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if let Some(c) = composite_loss {
        if c.len() != pool.len() {
            return Err(Error::LengthMismatch { expected: pool.len(), got: c.len() });
        }
    }
    let (mu, var) = gp.posterior(candidate);
    let optimistic = mu + cfg.beta.sqrt() * var.sqrt();
    let mut total = 0.0;
    for (i, c) in pool.iter().enumerate() {
        let best = composite_loss.map_or(cfg.no_model_floor, |l| -l[i]);
        total += (optimistic - cfg.gap_slope * (candidate - c).norm() - best).max(0.0);
    }
    Ok(total / pool.len() as f64)
}

/// Argmax of the acquisition over unselected pool entries. The pool is in
/// lexicographic `(direction, level)` order, so keeping the first maximum
/// breaks ties toward the lowest code pair. Returns the choice and the
/// score of every candidate (`None` for already-selected ones).
pub fn select_next_context(
    pool: &[ContextPoint],
    selected: &[usize],
    gp: &GpModel,
    table: &PerformanceTable,
    cfg: &AcquisitionConfig,
) -> Result<(usize, Vec<Option<f64>>)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut scores = vec![None; pool.len()];
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in pool.iter().enumerate() {
        if selected.contains(&i) {
            continue;
        }
        let a = acquisition(c, gp, table.composite(), pool, cfg)?;
        scores[i] = Some(a);
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| (i, scores)).ok_or(Error::PoolExhausted)
}

pub struct TrainedModel<M> {
    pub model: M,
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

/// Trains a model for one context and measures a model's loss in any
/// context; lets the selection loop run against real training or against
/// synthetic landscapes.
pub trait ContextLearner {
    type Model: Clone;

    fn train(&mut self, context: usize) -> Result<TrainedModel<Self::Model>>;

    fn evaluate(&mut self, model: &Self::Model, context: usize) -> Result<f64>;

    fn evaluate_pool(&mut self, model: &Self::Model, pool_len: usize) -> Result<Vec<f64>> {
        (0..pool_len).map(|c| self.evaluate(model, c)).collect()
    }

    /// Where the model's training history is stored, for the trace.
    fn history_ref(&self, context: usize) -> String {
        format!("context-{context}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub context: String,
    pub acquisition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub chosen_context: String,
    pub acquisition_per_candidate: Vec<CandidateScore>,
    pub training_loss_history_ref: String,
    #[serde(rename = "V_aggregate")]
    pub v_aggregate: f64,
    pub converged: bool,
}

pub struct LearningOutcome<M> {
    /// `(context index, model)` in selection order.
    pub models: Vec<(usize, M)>,
    pub table: PerformanceTable,
    pub trace: Vec<TraceStep>,
}

impl<M> LearningOutcome<M> {
    pub fn selected(&self) -> Vec<usize> {
        self.models.iter().map(|(c, _)| *c).collect()
    }
}

/// The budgeted contextual learning loop: fit the GP on realized training
/// performance, pick the acquisition maximizer, train there, evaluate the
/// new model across the pool, and fold it into the table.
pub fn run_contextual_learning<L: ContextLearner>(
    learner: &mut L,
    labels: &[String],
    pool: &[ContextPoint],
    budget: usize,
    cfg: &SelectionConfig,
) -> Result<LearningOutcome<L::Model>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if budget == 0 || budget > pool.len() {
        return Err(Error::InvalidParameter(format!("budget {budget} outside 1..={}", pool.len())));
    }
    let mut table = PerformanceTable::new(labels.to_vec(), pool.to_vec())?;
    let mut gp = GpModel::new(cfg.gp);
    let mut selected = Vec::with_capacity(budget);
    let mut models = Vec::with_capacity(budget);
    let mut trace = Vec::with_capacity(budget);
    for k in 1..=budget {
        let (choice, scores) = select_next_context(pool, &selected, &gp, &table, &cfg.acquisition)?;
        log::info!("step {k}: training on {}", labels[choice]);
        let trained = learner.train(choice)?;
        if !trained.converged {
            log::warn!("training on {} did not converge; keeping the final parameters", labels[choice]);
        }
        let losses = learner.evaluate_pool(&trained.model, pool.len())?;
        let own = losses[choice];
        table.update_value(labels[choice].clone(), choice, losses)?;
        gp.add(pool[choice], -own)?;
        selected.push(choice);
        trace.push(TraceStep {
            step: k,
            chosen_context: labels[choice].clone(),
            acquisition_per_candidate: labels
                .iter()
                .zip(scores)
                .map(|(l, a)| CandidateScore { context: l.clone(), acquisition: a })
                .collect(),
            training_loss_history_ref: learner.history_ref(choice),
            v_aggregate: table.aggregate().expect("table has a row"),
            converged: trained.converged,
        });
        models.push((choice, trained.model));
    }
    Ok(LearningOutcome { models, table, trace })
}
