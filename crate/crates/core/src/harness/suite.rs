use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::learner::NetworkLearner;
use super::stats::{sign_test, SignTest};
use super::{
    run_episode_observed, Controller, ControllerKind, ExperimentConfig, ModelSet, RunMetadata, RunRecord, Scenario,
};
use crate::control::ReferencePoint;
use crate::environment::{ContextMap, Environment, FlowBand};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, CheckpointMetadata, ThetaMapping};
use crate::seed::{self, tag};
use crate::selection::{run_contextual_learning, TraceStep};
use crate::sim::StepOutput;
use crate::training::calm_index;
use crate::trajectory::{streams, TrajectoryKind};

pub const COURSE: &str = "course";
pub const RESULTS_HEADER: &str = "controller,env,trajectory,rmse_ape_m,max_ape_m,n_runs";
const SIGNIFICANCE: f64 = 0.05;

/// A trained model set with its checkpoints and selection trace.
#[derive(Debug, Clone)]
pub struct LearnedSet {
    pub set: ModelSet,
    pub checkpoints: Vec<Checkpoint>,
    pub trace: Vec<TraceStep>,
}

/// Runs budgeted selection with `learner`, which may already hold trained
/// contexts from an earlier call.
pub fn learn(cfg: &ExperimentConfig, learner: &mut NetworkLearner, budget: usize) -> Result<LearnedSet> {
    let labels = cfg.labels()?;
    let out = run_contextual_learning(learner, &labels, &cfg.points()?, budget, &cfg.selection)?;
    let mut nets = Vec::with_capacity(out.models.len());
    let mut checkpoints = Vec::with_capacity(out.models.len());
    for (ctx, model) in &out.models {
        checkpoints.push(checkpoint_for(learner, *ctx)?);
        nets.push(model.net.clone());
    }
    Ok(LearnedSet { set: ModelSet::new(out.table, nets)?, checkpoints, trace: out.trace })
}

/// Checkpoint of the network `learner` trained on pool context `ctx`.
pub fn checkpoint_for(learner: &NetworkLearner, ctx: usize) -> Result<Checkpoint> {
    let label = learner.pool.get(ctx).ok_or(Error::EmptyPool)?.label();
    let o = learner.outcome(ctx).ok_or_else(|| Error::MissingModel(label.clone()))?;
    let meta = CheckpointMetadata {
        context: label,
        context_codes: learner.pool[ctx].codes(),
        seed: learner.seed,
        loss_history: o.loss_history.clone(),
        converged: o.converged,
        skipped_updates: o.skipped_updates,
    };
    Ok(Checkpoint::new(&o.net, ThetaMapping::default(), meta))
}

pub fn learner_for(cfg: &ExperimentConfig, seed: u64) -> Result<NetworkLearner> {
    Ok(NetworkLearner::new(cfg.pool()?, cfg.training, cfg.sim(), seed))
}

/// How `kind` flies with the models in `set`: `one` uses the best-mean
/// row everywhere, `budget` and `full` select per context.
pub fn controller_from_set(kind: ControllerKind, set: Option<&ModelSet>) -> Result<Controller<'_>> {
    if kind == ControllerKind::Base {
        return Ok(Controller::Base);
    }
    let set = set.ok_or_else(|| Error::MissingModel(format!("controller '{}' needs trained models", kind.name())))?;
    Ok(match kind {
        ControllerKind::One => {
            let (id, net) = set.best_mean()?;
            Controller::Fixed { id, net }
        }
        _ => Controller::Contextual(set),
    })
}

pub enum TestMap {
    Band(FlowBand),
    Env(Environment),
}

impl ContextMap for TestMap {
    fn context_at(&self, p: &Vector3<f64>) -> Option<usize> {
        match self {
            TestMap::Band(b) => b.context_at(p),
            TestMap::Env(e) => e.context_at(p),
        }
    }
}

/// One test episode: a reference stream and the wind layout it is flown in.
pub struct TestCase {
    pub env: u8,
    pub trajectory: String,
    pub stream: usize,
    pub map: TestMap,
    pub references: Vec<ReferencePoint>,
}

impl TestCase {
    fn trajectory_code(&self) -> u64 {
        TrajectoryKind::ALL.iter().position(|k| k.name() == self.trajectory).unwrap_or(TrajectoryKind::ALL.len()) as u64
    }

    /// Shared by every controller so comparisons see the same noise.
    pub fn seed(&self, run_seed: u64) -> u64 {
        seed::derive(run_seed, &[tag::TEST_EPISODE, self.env as u64, self.trajectory_code(), self.stream as u64])
    }
}

/// The course once per pool context.
pub fn course_cases(cfg: &ExperimentConfig) -> Result<Vec<TestCase>> {
    let refs = cfg.training.course.references(cfg.estimator.rate_hz);
    Ok((0..cfg.pool()?.len())
        .map(|c| TestCase {
            env: 0,
            trajectory: COURSE.into(),
            stream: c,
            map: TestMap::Band(cfg.training.course.field(c)),
            references: refs.clone(),
        })
        .collect())
}

/// Every stream of `kind` in environment `env`.
pub fn environment_cases(cfg: &ExperimentConfig, env: u8, kind: TrajectoryKind) -> Result<Vec<TestCase>> {
    let environment = cfg.environment(env)?;
    Ok(streams(kind, &cfg.volume(), &cfg.trajectory)
        .into_iter()
        .enumerate()
        .map(|(i, references)| TestCase {
            env,
            trajectory: kind.name().into(),
            stream: i,
            map: TestMap::Env(environment.clone()),
            references,
        })
        .collect())
}

pub fn all_cases(cfg: &ExperimentConfig) -> Result<Vec<TestCase>> {
    let mut out = course_cases(cfg)?;
    for env in cfg.environments()? {
        for kind in TrajectoryKind::ALL {
            out.extend(environment_cases(cfg, env.id, kind)?);
        }
    }
    Ok(out)
}

pub fn run_case(
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    controller: &Controller,
    case: &TestCase,
    run_seed: u64,
) -> Result<RunRecord> {
    run_case_observed(cfg, kind, controller, case, run_seed, &mut |_| Ok(()))
}

pub fn run_case_observed(
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    controller: &Controller,
    case: &TestCase,
    run_seed: u64,
    observer: &mut dyn FnMut(&StepOutput) -> Result<()>,
) -> Result<RunRecord> {
    let pool = cfg.pool()?;
    let scenario = Scenario { map: &case.map, pool: &pool, calm: calm_index(&pool)?, references: &case.references };
    let meta = RunMetadata {
        controller: kind.name().into(),
        env: case.env,
        trajectory: case.trajectory.clone(),
        stream: case.stream,
        seed: run_seed,
        config_hash: cfg.hash(),
        ..Default::default()
    };
    run_episode_observed(controller, &scenario, &cfg.sim(), case.seed(run_seed), meta, observer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub budget_selection: Vec<String>,
    pub one_model: String,
    /// Mean RMSE APE over the course flown in every pool context.
    pub pool_rmse_ape_m: BTreeMap<String, f64>,
    /// Mean max APE over square and figure-eight in every environment.
    pub mean_max_ape_m: BTreeMap<String, f64>,
    pub budget_v: f64,
    pub full_v: f64,
    pub aborted_runs: usize,
}

pub struct SeedRun {
    pub summary: SeedSummary,
    pub budget: LearnedSet,
    pub full: LearnedSet,
    pub records: Vec<RunMetadata>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Learns the budgeted and full model sets for one seed, then flies every
/// controller through every test case. `sink` sees each record as it is
/// produced.
pub fn run_seed(
    cfg: &ExperimentConfig,
    run_seed: u64,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<SeedRun> {
    let mut learner = learner_for(cfg, run_seed)?;
    let budget = learn(cfg, &mut learner, cfg.suite.budget)?;
    let full = learn(cfg, &mut learner, cfg.pool()?.len())?;
    let cases = all_cases(cfg)?;
    let set_for = |kind| match kind {
        ControllerKind::Budget => &budget.set,
        _ => &full.set,
    };
    let cells: Vec<(ControllerKind, &TestCase)> =
        ControllerKind::ALL.into_iter().flat_map(|k| cases.iter().map(move |c| (k, c))).collect();
    let flown: Vec<RunRecord> = cells
        .par_iter()
        .map(|(kind, case)| run_case(cfg, *kind, &controller_from_set(*kind, Some(set_for(*kind)))?, case, run_seed))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(flown.len());
    for rec in flown {
        sink(&rec)?;
        records.push(rec.meta);
    }
    let mut pool_rmse = BTreeMap::new();
    let mut max_ape = BTreeMap::new();
    for kind in ControllerKind::ALL {
        let mine = || records.iter().filter(move |m| m.controller == kind.name());
        pool_rmse.insert(kind.name().to_string(), mean(mine().filter(|m| m.env == 0).map(|m| m.rmse_ape_m)));
        max_ape.insert(
            kind.name().to_string(),
            mean(mine().filter(|m| m.env > 0 && m.trajectory != TrajectoryKind::Hover.name()).map(|m| m.max_ape_m)),
        );
    }
    let summary = SeedSummary {
        seed: run_seed,
        budget_selection: budget.trace.iter().map(|t| t.chosen_context.clone()).collect(),
        one_model: full.set.best_mean()?.0,
        pool_rmse_ape_m: pool_rmse,
        mean_max_ape_m: max_ape,
        budget_v: budget.set.table.aggregate().unwrap_or(f64::NAN),
        full_v: full.set.table.aggregate().unwrap_or(f64::NAN),
        aborted_runs: records.iter().filter(|m| m.aborted.is_some()).count(),
    };
    Ok(SeedRun { summary, budget, full, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub claim: String,
    pub metric: String,
    pub better: String,
    pub worse: String,
    pub better_values: Vec<f64>,
    pub worse_values: Vec<f64>,
    /// `(worse − better) / worse` on the seed means.
    pub relative_improvement: f64,
    pub test: SignTest,
    pub passed: bool,
}

fn compare(
    seeds: &[SeedSummary],
    metric: &str,
    better: ControllerKind,
    worse: ControllerKind,
    ties: bool,
) -> Comparison {
    let pick = |k: ControllerKind| -> Vec<f64> {
        seeds
            .iter()
            .map(|s| {
                let m = if metric == "pool_rmse_ape_m" { &s.pool_rmse_ape_m } else { &s.mean_max_ape_m };
                m.get(k.name()).copied().unwrap_or(f64::NAN)
            })
            .collect()
    };
    let (b, w) = (pick(better), pick(worse));
    let mb = mean(b.iter().copied());
    let mw = mean(w.iter().copied());
    let test = sign_test(&b, &w, ties);
    let relation = if ties { "<=" } else { "<" };
    Comparison {
        claim: format!("{} {relation} {} on {metric}", better.name(), worse.name()),
        metric: metric.into(),
        better: better.name().into(),
        worse: worse.name().into(),
        better_values: b,
        worse_values: w,
        relative_improvement: (mw - mb) / mw,
        passed: test.passes(SIGNIFICANCE),
        test,
    }
}

/// The three ordering claims: budget beats one on both metrics, and full
/// is no worse than budget on the pool.
pub fn ordering_comparisons(seeds: &[SeedSummary]) -> Vec<Comparison> {
    use ControllerKind::{Budget, Full, One};
    vec![
        compare(seeds, "pool_rmse_ape_m", Budget, One, false),
        compare(seeds, "mean_max_ape_m", Budget, One, false),
        compare(seeds, "pool_rmse_ape_m", Full, Budget, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub seeds: Vec<SeedSummary>,
    pub comparisons: Vec<Comparison>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn new(config_hash: String, seeds: Vec<SeedSummary>) -> Self {
        let comparisons = ordering_comparisons(&seeds);
        let passed = comparisons.iter().all(|c| c.passed);
        Self { config_hash, seeds, comparisons, passed }
    }
}

type Cell = (usize, String, u8, String);

fn cells(records: &[RunMetadata]) -> BTreeMap<Cell, Vec<&RunMetadata>> {
    let rank = |c: &str| ControllerKind::parse(c).map(|k| k as usize).unwrap_or(usize::MAX);
    let mut groups: BTreeMap<Cell, Vec<&RunMetadata>> = BTreeMap::new();
    for m in records {
        groups.entry((rank(&m.controller), m.controller.clone(), m.env, m.trajectory.clone())).or_default().push(m);
    }
    groups
}

/// Mean RMSE and max APE over the runs of a cell that produced metrics.
fn cell_means(runs: &[&RunMetadata]) -> Option<(f64, f64, usize)> {
    let ok: Vec<_> = runs.iter().filter(|m| m.rmse_ape_m.is_finite()).collect();
    if ok.is_empty() {
        return None;
    }
    Some((mean(ok.iter().map(|m| m.rmse_ape_m)), mean(ok.iter().map(|m| m.max_ape_m)), ok.len()))
}

/// Aggregates run records by controller, environment and trajectory. Runs
/// without metrics are left out; a cell with none has empty values and
/// `n_runs = 0`.
pub fn results_table(records: &[RunMetadata]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for ((_, controller, env, trajectory), runs) in cells(records) {
        match cell_means(&runs) {
            Some((rmse, max, n)) => {
                let _ = writeln!(out, "{controller},{env},{trajectory},{rmse:.9},{max:.9},{n}");
            }
            None => {
                let _ = writeln!(out, "{controller},{env},{trajectory},,,0");
            }
        }
    }
    out
}

/// Mean RMSE APE with one row per controller and one column per
/// `env{e}_{trajectory}`. Missing cells are empty.
pub fn pivot_table(records: &[RunMetadata]) -> String {
    let groups = cells(records);
    let columns: std::collections::BTreeSet<(u8, String)> = groups.keys().map(|k| (k.2, k.3.clone())).collect();
    let mut rows: BTreeMap<(usize, String), BTreeMap<(u8, String), f64>> = BTreeMap::new();
    for ((rank, controller, env, trajectory), runs) in &groups {
        let row = rows.entry((*rank, controller.clone())).or_default();
        if let Some((rmse, _, _)) = cell_means(runs) {
            row.insert((*env, trajectory.clone()), rmse);
        }
    }
    let mut out = String::from("controller");
    for (env, trajectory) in &columns {
        let _ = write!(out, ",env{env}_{trajectory}");
    }
    out.push('\n');
    for ((_, controller), row) in rows {
        out.push_str(&controller);
        for c in &columns {
            match row.get(c) {
                Some(v) => {
                    let _ = write!(out, ",{v:.9}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean max APE per cell, the data behind a max-APE bar chart.
pub fn max_ape_summary(records: &[RunMetadata]) -> String {
    let mut out = String::from("controller,env,trajectory,mean_max_ape_m,n_runs\n");
    for ((_, controller, env, trajectory), runs) in cells(records) {
        match cell_means(&runs) {
            Some((_, max, n)) => {
                let _ = writeln!(out, "{controller},{env},{trajectory},{max:.9},{n}");
            }
            None => {
                let _ = writeln!(out, "{controller},{env},{trajectory},,0");
            }
        }
    }
    out
}

/// Percent improvement `100 (one − c) / one` of each controller over the
/// single-model controller, per cell, on RMSE and max APE.
pub fn improvement_table(records: &[RunMetadata]) -> String {
    let groups = cells(records);
    let reference: BTreeMap<(u8, String), (f64, f64, usize)> = groups
        .iter()
        .filter(|(k, _)| k.1 == ControllerKind::One.name())
        .filter_map(|(k, runs)| cell_means(runs).map(|m| ((k.2, k.3.clone()), m)))
        .collect();
    let mut out = String::from("controller,env,trajectory,rmse_improvement_pct,max_improvement_pct\n");
    for ((_, controller, env, trajectory), runs) in &groups {
        let pct = |a: f64, b: f64| format!("{:.3}", 100.0 * (b - a) / b);
        let (r, m) = match (cell_means(runs), reference.get(&(*env, trajectory.clone()))) {
            (Some((r, m, _)), Some((rr, rm, _))) => (pct(r, *rr), pct(m, *rm)),
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{controller},{env},{trajectory},{r},{m}");
    }
    out
}

/// `t,ape_m` for one run.
pub fn ape_series(times: &[f64], positions: &[[f64; 3]], setpoints: &[[f64; 3]]) -> Result<String> {
    let m = super::compute_metrics(positions, setpoints)?;
    let mut out = String::from("t,ape_m\n");
    for (t, a) in times.iter().zip(&m.ape) {
        let _ = writeln!(out, "{t},{a}");
    }
    Ok(out)
}
