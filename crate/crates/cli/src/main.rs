use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ctxmhe_core::gradcheck::run_gradcheck;
use ctxmhe_core::harness::record::list_runs;
use ctxmhe_core::harness::suite::{self, TestCase};
use ctxmhe_core::harness::{store, ControllerKind, ExperimentConfig, ModelSet, RunMetadata, RunRecord};
use ctxmhe_core::mhe::write_dump;
use ctxmhe_core::selection::ContextLearner;
use ctxmhe_core::training::{end_to_end_gradcheck, norm_relative_error, FdMode};
use ctxmhe_core::trajectory::TrajectoryKind;

#[derive(Parser)]
#[command(name = "ctxmhe", version, about = "Contextual moving-horizon disturbance estimation experiments")]
struct Cli {
    /// Experiment config (JSON); missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Traj {
    Hover,
    Square,
    Figure8,
}

impl From<Traj> for TrajectoryKind {
    fn from(t: Traj) -> Self {
        match t {
            Traj::Hover => TrajectoryKind::Hover,
            Traj::Square => TrajectoryKind::Square,
            Traj::Figure8 => TrajectoryKind::Figure8,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Base,
    One,
    Budget,
    Full,
}

impl From<Kind> for ControllerKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Base => ControllerKind::Base,
            Kind::One => ControllerKind::One,
            Kind::Budget => ControllerKind::Budget,
            Kind::Full => ControllerKind::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Frozen,
    Resimulated,
}

#[derive(Subcommand)]
enum Command {
    /// Budgeted context selection; writes checkpoints, table and trace.
    Select {
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "models")]
        out: PathBuf,
        /// Defaults to the suite base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains one context and writes its checkpoint.
    Train {
        /// Context label (e.g. HW-L) or pool index.
        #[arg(long)]
        context: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path; defaults to `<label>.json` in the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flies every stream of a trajectory in one environment.
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        env: u8,
        #[arg(long, value_enum)]
        traj: Traj,
        #[arg(long, value_enum)]
        controller: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model set written by `select`; without it the models are learned
        /// in-process with the same seed.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Writes every MHE window and solution as CSV.
        #[arg(long)]
        dump_mhe: Option<PathBuf>,
    },
    /// Aggregates run records into the results table.
    Eval {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "table.csv")]
        out: PathBuf,
    },
    /// Finite-difference check of the weight sensitivities, or with
    /// `--end-to-end` of the network gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        end_to_end: bool,
        #[arg(long, value_enum, default_value = "resimulated")]
        mode: Mode,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes plot data: APE series per run and summary tables.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Selection, training and evaluation of all controllers over the
    /// configured seeds.
    Suite {
        #[arg(long, default_value = "suite")]
        out: PathBuf,
        /// Overrides the configured number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Also writes every run record.
        #[arg(long)]
        save_runs: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Select { budget, out, seed } => select(&cfg, budget, &out, seed.unwrap_or(cfg.suite.base_seed)),
        Command::Train { context, seed, out } => train(&cfg, &context, seed.unwrap_or(cfg.suite.base_seed), out),
        Command::Simulate { env, traj, controller, seed, models, out, dump_mhe } => {
            simulate(&cfg, env, traj.into(), controller.into(), seed, models.as_deref(), &out, dump_mhe.as_deref())
        }
        Command::Eval { runs, out } => eval(&runs, &out),
        Command::Gradcheck { instances, horizon, seed, end_to_end, mode, samples, steps, out } => {
            if end_to_end {
                gradcheck_network(&cfg, mode, samples, steps, seed, out.as_deref())
            } else {
                gradcheck(instances, horizon, seed, out.as_deref())
            }
        }
        Command::Plot { runs, out } => plot(&runs, &out),
        Command::Suite { out, seeds, save_runs } => run_suite(cfg, &out, seeds, save_runs),
    }
}

fn select(cfg: &ExperimentConfig, budget: usize, out: &Path, seed: u64) -> Result<i32> {
    let mut learner = suite::learner_for(cfg, seed)?;
    let learned = suite::learn(cfg, &mut learner, budget)?;
    store::save(out, &cfg.hash(), seed, &learned.set.table, &learned.checkpoints, &learned.trace)?;
    for t in &learned.trace {
        println!("step {}: {} V={:.9}", t.step, t.chosen_context, t.v_aggregate);
    }
    Ok(0)
}

fn train(cfg: &ExperimentConfig, context: &str, seed: u64, out: Option<PathBuf>) -> Result<i32> {
    let ctx = cfg.context_index(context)?;
    let mut learner = suite::learner_for(cfg, seed)?;
    learner.train(ctx)?;
    let checkpoint = suite::checkpoint_for(&learner, ctx)?;
    let path = out.unwrap_or_else(|| PathBuf::from(store::checkpoint_name(&checkpoint.metadata.context)));
    write_file(&path, &checkpoint.to_json()?)?;
    println!("episode,loss");
    for (i, l) in checkpoint.metadata.loss_history.iter().enumerate() {
        println!("{i},{l}");
    }
    Ok(0)
}

/// Loads `dir`, or learns the set `kind` flies with: the budget for
/// `budget`, the whole pool otherwise.
fn model_set(cfg: &ExperimentConfig, kind: ControllerKind, dir: Option<&Path>, seed: u64) -> Result<Option<ModelSet>> {
    if kind == ControllerKind::Base {
        return Ok(None);
    }
    if let Some(dir) = dir {
        return Ok(Some(store::load(dir).with_context(|| format!("loading models from {}", dir.display()))?.1));
    }
    let budget = if kind == ControllerKind::Budget { cfg.suite.budget } else { cfg.pool()?.len() };
    let mut learner = suite::learner_for(cfg, seed)?;
    Ok(Some(suite::learn(cfg, &mut learner, budget)?.set))
}

fn dump_path(base: &Path, stream: usize, streams: usize) -> PathBuf {
    if streams == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("mhe");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}_{stream}.{ext}"))
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    cfg: &ExperimentConfig,
    env: u8,
    traj: TrajectoryKind,
    kind: ControllerKind,
    seed: u64,
    models: Option<&Path>,
    out: &Path,
    dump: Option<&Path>,
) -> Result<i32> {
    let set = model_set(cfg, kind, models, seed)?;
    let controller = suite::controller_from_set(kind, set.as_ref())?;
    let cases: Vec<TestCase> = suite::environment_cases(cfg, env, traj)?;
    let dump = match dump {
        Some(_) if kind == ControllerKind::Base => {
            log::warn!("the base controller runs an EKF; --dump-mhe ignored");
            None
        }
        d => d,
    };
    let mut aborted = false;
    for case in &cases {
        let record = match dump {
            Some(base) => {
                let path = dump_path(base, case.stream, cases.len());
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
                let mut first = true;
                let record = suite::run_case_observed(cfg, kind, &controller, case, seed, &mut |out| {
                    if let Some(m) = &out.mhe {
                        write_dump(&mut file, out.step, &m.window, &m.solution, first)?;
                        first = false;
                    }
                    Ok(())
                })?;
                file.flush()?;
                record
            }
            None => suite::run_case(cfg, kind, &controller, case, seed)?,
        };
        let path = record.save(out)?;
        let m = &record.meta;
        println!(
            "{} stream {}: rmse_ape_m={:.9} max_ape_m={:.9} steps={}{}",
            path.display(),
            m.stream,
            m.rmse_ape_m,
            m.max_ape_m,
            m.steps,
            m.aborted.as_deref().map(|a| format!(" aborted: {a}")).unwrap_or_default()
        );
        aborted |= m.aborted.is_some();
    }
    Ok(if aborted { 1 } else { 0 })
}

fn load_metadata(runs: &Path) -> Result<Vec<(PathBuf, RunMetadata)>> {
    let files = list_runs(runs).with_context(|| format!("listing runs in {}", runs.display()))?;
    if files.is_empty() {
        bail!("no run records in {}", runs.display());
    }
    files
        .into_iter()
        .map(|f| {
            let (meta, ..) = RunRecord::load(&f).with_context(|| format!("reading {}", f.display()))?;
            Ok((f, meta))
        })
        .collect()
}

fn eval(runs: &Path, out: &Path) -> Result<i32> {
    let metas: Vec<RunMetadata> = load_metadata(runs)?.into_iter().map(|(_, m)| m).collect();
    let table = suite::results_table(&metas);
    write_file(out, &table)?;
    print!("{table}");
    Ok(0)
}

fn gradcheck(instances: usize, horizon: usize, seed: u64, out: Option<&Path>) -> Result<i32> {
    let report = run_gradcheck(instances, horizon, seed)?;
    let csv = report.to_csv();
    match out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "{}: worst relative error {:.3e} over {instances} instances (tolerance {:.0e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.worst(),
        report.tolerance
    );
    Ok(if report.passed() { 0 } else { 1 })
}

const END_TO_END_TOLERANCE: f64 = 1e-2;
const END_TO_END_FD_STEP: f64 = 1e-6;

fn gradcheck_network(
    cfg: &ExperimentConfig,
    mode: Mode,
    samples: usize,
    steps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32> {
    let mode = match mode {
        Mode::Frozen => FdMode::Frozen,
        Mode::Resimulated => FdMode::Resimulated,
    };
    let pool = cfg.pool()?;
    let ctx = seed as usize % pool.len();
    let checks =
        end_to_end_gradcheck(ctx, &pool, &cfg.training, &cfg.sim(), seed, steps, samples, END_TO_END_FD_STEP, mode)?;
    let mut csv = String::from("parameter,analytic,numeric,rel_err,pass\n");
    for c in &checks {
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{:.3e},{}\n",
            c.index,
            c.analytic,
            c.numeric,
            c.rel_err,
            c.rel_err < END_TO_END_TOLERANCE
        ));
    }
    match out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    let failing = checks.iter().filter(|c| c.rel_err >= END_TO_END_TOLERANCE).count();
    eprintln!(
        "{}: {failing}/{} parameters at or above {END_TO_END_TOLERANCE:.0e}; norm-wise relative error {:.3e}",
        if failing == 0 { "PASS" } else { "FAIL" },
        checks.len(),
        norm_relative_error(&checks)
    );
    Ok(if failing == 0 { 0 } else { 1 })
}

fn plot(runs: &Path, out: &Path) -> Result<i32> {
    let loaded = load_metadata(runs)?;
    let series = out.join("ape");
    fs::create_dir_all(&series)?;
    for (file, meta) in &loaded {
        let (_, setpoints, positions, times) = RunRecord::load(file)?;
        if positions.is_empty() {
            continue;
        }
        let csv = suite::ape_series(&times, &positions, &setpoints)?;
        write_file(&series.join(format!("{}.csv", meta.file_stem())), &csv)?;
    }
    let metas: Vec<RunMetadata> = loaded.into_iter().map(|(_, m)| m).collect();
    write_file(&out.join("rmse_table.csv"), &suite::pivot_table(&metas))?;
    write_file(&out.join("max_ape.csv"), &suite::max_ape_summary(&metas))?;
    write_file(&out.join("improvement.csv"), &suite::improvement_table(&metas))?;
    println!("{} series written to {}", metas.len(), series.display());
    Ok(0)
}

fn run_suite(mut cfg: ExperimentConfig, out: &Path, seeds: Option<usize>, save_runs: bool) -> Result<i32> {
    if let Some(n) = seeds {
        cfg.suite.seeds = n;
        cfg.validate()?;
    }
    fs::create_dir_all(out)?;
    write_file(&out.join("config.json"), &(cfg.to_json()? + "\n"))?;
    let hash = cfg.hash();
    let runs_dir = out.join("runs");
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for s in cfg.seeds() {
        log::info!("seed {s}");
        let mut sink = |r: &RunRecord| -> ctxmhe_core::Result<()> {
            if save_runs {
                r.save(&runs_dir)?;
            }
            Ok(())
        };
        let run = suite::run_seed(&cfg, s, &mut sink)?;
        let dir = out.join(format!("seed{s}"));
        for (name, learned) in [("budget", &run.budget), ("full", &run.full)] {
            store::save(&dir.join(name), &hash, s, &learned.set.table, &learned.checkpoints, &learned.trace)?;
        }
        println!(
            "seed {s}: budget selection {} | one model {} | aborted runs {}",
            run.summary.budget_selection.join(" "),
            run.summary.one_model,
            run.summary.aborted_runs
        );
        summaries.push(run.summary);
        records.extend(run.records);
    }
    let report = suite::SuiteReport::new(hash, summaries);
    write_file(&out.join("results.csv"), &suite::results_table(&records))?;
    write_file(&out.join("table.csv"), &suite::pivot_table(&records))?;
    write_file(&out.join("max_ape.csv"), &suite::max_ape_summary(&records))?;
    write_file(&out.join("improvement.csv"), &suite::improvement_table(&records))?;
    write_file(&out.join("summary.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    for c in &report.comparisons {
        println!(
            "{} {}: {}/{} seeds, p = {:.4}, relative improvement {:.2}%",
            if c.passed { "PASS" } else { "FAIL" },
            c.claim,
            c.test.successes,
            c.test.n,
            c.test.p_value,
            100.0 * c.relative_improvement
        );
    }
    Ok(0)
}
