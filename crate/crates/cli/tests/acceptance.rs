//! Acceptance suite. Each test prints one PASS/FAIL line and asserts it.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ctxmhe_core::control::{lee_control, MotorMixer, ReferencePoint, ThrustMoment};
use ctxmhe_core::dynamics::{Disturbance, QuadParams, RigidBodyState, WindConfig};
use ctxmhe_core::gradcheck::run_gradcheck;
use ctxmhe_core::harness::config::ExperimentConfig;
use ctxmhe_core::harness::suite::{run_seed, SuiteReport};
use ctxmhe_core::mhe::solve_mhe;
use ctxmhe_core::selection::{
    acquisition, context_point, run_contextual_learning, ContextLearner, ContextPoint, GpConfig, GpModel,
    SelectionConfig, TrainedModel,
};
use ctxmhe_core::training::{end_to_end_gradcheck, norm_relative_error, FdMode};
use nalgebra::Vector3;
use oracles::{
    brute_acquisition, dense_gp, greedy_oracle, random_landscape, random_window, rts_smoother, GreedyParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u8, name: &str, pass: bool, detail: String, started: Instant) {
    println!(
        "{} [{id}] {name}: {detail} ({:.2} s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
}

fn pool() -> (Vec<String>, Vec<ContextPoint>) {
    let p = WindConfig::default().pool().unwrap();
    (p.iter().map(|c| c.label()).collect(), p.iter().map(context_point).collect())
}

#[test]
fn c1_mhe_matches_rts_smoother() {
    let t = Instant::now();
    let windows = 25;
    let mut worst = 0.0f64;
    for seed in 0..windows {
        let (window, weights) = random_window(1000 + seed, 10);
        let sol = solve_mhe(&window, &weights).unwrap();
        for (a, b) in sol.states.iter().zip(rts_smoother(&window, &weights)) {
            worst = worst.max((a.0 - b).amax());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        "MHE equals the RTS smoother",
        worst < 1e-6 && secs < 10.0,
        format!("{windows} windows, n=9, N=10, max |diff| {worst:.2e}"),
        t,
    );
}

#[test]
fn c2_weight_sensitivity_matches_finite_differences() {
    let t = Instant::now();
    let report = run_gradcheck(20, 10, 1).unwrap();
    let components = report.rows.len();
    let cli = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_ctxmhe"))
        .args(["gradcheck", "--instances", "20", "--horizon", "10"])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    let cli_secs = cli.elapsed().as_secs_f64();
    verdict(
        2,
        "sensitivity equals central differences",
        report.passed() && components == 25 && status.status.success() && cli_secs < 60.0,
        format!(
            "{components} components x 20 instances, worst rel err {:.2e}; `ctxmhe gradcheck` {cli_secs:.2} s",
            report.worst()
        ),
        t,
    );
}

#[test]
fn c3_network_gradient_matches_resimulated_differences() {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let pool = cfg.pool().unwrap();
    let sim = cfg.sim();
    let mut failing = 0;
    let mut total = 0;
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for (ctx, seed) in [(5usize, 1u64), (7, 2), (11, 3)] {
        let resim =
            end_to_end_gradcheck(ctx, &pool, &cfg.training, &sim, seed, 3, 50, 1e-6, FdMode::Resimulated).unwrap();
        let frozen = end_to_end_gradcheck(ctx, &pool, &cfg.training, &sim, seed, 3, 50, 1e-6, FdMode::Frozen).unwrap();
        failing += resim.iter().filter(|c| c.rel_err >= 1e-2).count();
        total += resim.len();
        worst = resim.iter().map(|c| c.rel_err).fold(worst, f64::max);
        notes.push(format!(
            "ctx {ctx}: norm {:.1e}, frozen worst {:.1e}",
            norm_relative_error(&resim),
            frozen.iter().map(|c| c.rel_err).fold(0.0, f64::max)
        ));
    }
    verdict(
        3,
        "network gradient equals re-simulated differences",
        failing == 0 && total >= 50,
        format!("{failing}/{total} parameters >= 1e-2, worst {worst:.2e}; {}", notes.join("; ")),
        t,
    );
}

#[test]
fn c4_gp_posterior() {
    let t = Instant::now();
    let (_, pts) = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut dense_err = 0.0f64;
    let mut variance_rises = 0;
    for trial in 0..20 {
        let cfg = GpConfig {
            length_scale: rng.random_range(0.5..3.0),
            signal_variance: rng.random_range(0.1..2.0),
            noise_variance: 1e-6,
            prior_mean: rng.random_range(-1.0..0.0),
            ..Default::default()
        };
        let n = 1 + trial % 10;
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
        let gp = GpModel::fit(cfg, &pts[..n], &values).unwrap();
        for q in &pts {
            let (m, v) = gp.posterior(q);
            let (mo, vo) = dense_gp(
                &pts[..n],
                &values,
                q,
                cfg.length_scale,
                cfg.signal_variance,
                cfg.noise_variance,
                cfg.prior_mean,
            );
            dense_err = dense_err.max((m - mo).abs()).max((v - vo.max(0.0)).abs());
        }
        let mut grown = GpModel::new(cfg);
        let mut prev: Vec<f64> = pts.iter().map(|q| grown.posterior(q).1).collect();
        for (p, y) in pts[..n].iter().zip(&values) {
            grown.add(*p, *y).unwrap();
            for (q, pv) in pts.iter().zip(prev.iter_mut()) {
                let v = grown.posterior(q).1;
                if v > *pv + 1e-12 {
                    variance_rises += 1;
                }
                *pv = v;
            }
        }
    }
    let exact = GpConfig { noise_variance: 0.0, ..Default::default() };
    let values: Vec<f64> = (0..7).map(|i| -0.07 * i as f64).collect();
    let gp = GpModel::fit(exact, &pts[..7], &values).unwrap();
    let interp = pts[..7]
        .iter()
        .zip(&values)
        .map(|(p, y)| {
            let (m, v) = gp.posterior(p);
            (m - y).abs().max(v.abs())
        })
        .fold(0.0, f64::max);
    verdict(
        4,
        "GP posterior",
        dense_err < 1e-10 && variance_rises == 0 && interp < 1e-10,
        format!("dense max diff {dense_err:.2e}, variance increases {variance_rises}, interpolation err {interp:.2e}"),
        t,
    );
}

struct Landscape(Vec<Vec<f64>>);

impl ContextLearner for Landscape {
    type Model = usize;

    fn train(&mut self, context: usize) -> ctxmhe_core::Result<TrainedModel<usize>> {
        Ok(TrainedModel { model: context, loss_history: vec![self.0[context][context]], converged: true })
    }

    fn evaluate(&mut self, model: &usize, context: usize) -> ctxmhe_core::Result<f64> {
        Ok(self.0[*model][context])
    }
}

#[test]
fn c5_acquisition_and_selection() {
    let t = Instant::now();
    let (labels, pts) = pool();
    let cfg = SelectionConfig::default();
    let (g, a) = (cfg.gp, cfg.acquisition);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut acq_err = 0.0f64;
    for n in 0..6 {
        let obs: Vec<ContextPoint> = (0..n).map(|i| pts[(5 * i) % 13]).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..-0.05)).collect();
        let gp = GpModel::fit(g, &obs, &values).unwrap();
        let composite: Option<Vec<f64>> = (n > 0).then(|| pts.iter().map(|_| rng.random_range(0.05..0.5)).collect());
        for c in &pts {
            let got = acquisition(c, &gp, composite.as_deref(), &pts, &a).unwrap();
            let (m, v) = dense_gp(&obs, &values, c, g.length_scale, g.signal_variance, g.noise_variance, g.prior_mean);
            let want = brute_acquisition(c, m, v, composite.as_deref(), &pts, a.beta, a.gap_slope, a.no_model_floor);
            acq_err = acq_err.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    let params = GreedyParams {
        length: g.length_scale,
        signal: g.signal_variance,
        noise: g.noise_variance,
        prior_mean: g.prior_mean,
        beta: a.beta,
        gap_slope: a.gap_slope,
        floor: a.no_model_floor,
    };
    let landscapes = 8;
    let mut mismatches = 0;
    let mut repeats = 0;
    let mut v_rises = 0;
    for seed in 0..landscapes {
        let land = random_landscape(500 + seed, &pts);
        let expected = greedy_oracle(&land, &pts, 3, &params);
        let out = run_contextual_learning(&mut Landscape(land), &labels, &pts, 3, &cfg).unwrap();
        let sel = out.selected();
        mismatches += usize::from(sel != expected);
        let mut d = sel.clone();
        d.sort_unstable();
        d.dedup();
        repeats += sel.len() - d.len();
        v_rises += out.trace.windows(2).filter(|w| w[1].v_aggregate > w[0].v_aggregate).count();
    }
    verdict(
        5,
        "acquisition and budgeted selection",
        acq_err < 1e-12 && mismatches == 0 && repeats == 0 && v_rises == 0,
        format!(
            "acquisition max rel diff {acq_err:.2e} on 13 contexts; {mismatches}/{landscapes} greedy mismatches, \
             {repeats} repeats, {v_rises} V increases"
        ),
        t,
    );
}

#[test]
fn c6_controller_mixer_and_weight_scaling() {
    let t = Instant::now();
    let params = QuadParams::default();
    let gains = ExperimentConfig::default().control.gains;
    let target = Vector3::new(0.4, -0.2, 0.7);
    let tm = lee_control(
        &RigidBodyState::at_rest(target),
        &ReferencePoint::hold(target),
        &gains,
        &params,
        &Disturbance::force_only(Vector3::zeros()),
    )
    .unwrap();
    let thrust_err = (tm.thrust - params.mass_kg * params.gravity_mps2).abs();
    let moment_err = tm.moment.amax();

    let mixer = MotorMixer::new(&params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut mix_err = 0.0f64;
    for _ in 0..200 {
        let tm = ThrustMoment {
            thrust: rng.random_range(0.0..0.6),
            moment: Vector3::new(
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-4..1e-4),
            ),
        };
        mix_err = mix_err.max((mixer.matrix() * mixer.mix(&tm) - tm.as_vector()).amax());
    }

    let mut scale_err = 0.0f64;
    for seed in 0..20 {
        let (window, weights) = random_window(600 + seed, 10);
        let lambda = rng.random_range(0.05..20.0);
        let a = solve_mhe(&window, &weights).unwrap();
        let b = solve_mhe(&window, &weights.scaled(lambda)).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            scale_err = scale_err.max((x.0 - y.0).amax());
        }
    }
    verdict(
        6,
        "hover control, mixing and weight scaling",
        thrust_err < 1e-12 && moment_err < 1e-12 && mix_err < 1e-10 && scale_err < 1e-9,
        format!(
            "|f - mg| {thrust_err:.1e}, |M| {moment_err:.1e}, mix round trip {mix_err:.1e}, scaling {scale_err:.1e}"
        ),
        t,
    );
}

#[test]
fn c7_controller_ordering_over_seeds() {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let seeds = cfg.seeds();
    let summaries: Vec<_> = seeds.iter().map(|&s| run_seed(&cfg, s, &mut |_| Ok(())).unwrap().summary).collect();
    let report = SuiteReport::new(cfg.hash(), summaries);
    let secs = t.elapsed().as_secs_f64();
    for c in &report.comparisons {
        println!(
            "     {}: {}/{} seeds, p = {:.4}, relative improvement {:.2}%",
            c.claim,
            c.test.successes,
            c.test.n,
            c.test.p_value,
            100.0 * c.relative_improvement
        );
    }
    let passed = report.comparisons.iter().filter(|c| c.passed).count();
    verdict(
        7,
        "budget beats one, full no worse than budget",
        report.passed && seeds.len() >= 5 && secs < 1800.0,
        format!("{passed}/{} claims at p < 0.05 over {} seeds", report.comparisons.len(), seeds.len()),
        t,
    );
}

fn snapshot(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            snapshot(&p, out);
        } else {
            out.insert(p.clone(), std::fs::read(&p).unwrap());
        }
    }
}

/// Runs `args` in a fresh directory seeded with the shared config and
/// returns stdout, stderr and every file left behind.
fn run_fresh(args: &[&str], config: &str) -> (i32, Vec<u8>, Vec<u8>, BTreeMap<PathBuf, Vec<u8>>) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), config).unwrap();
    let setup = dir.path().join("m");
    let status = Command::new(env!("CARGO_BIN_EXE_ctxmhe"))
        .current_dir(dir.path())
        .args(["--config", "config.json", "select", "--budget", "2", "--out"])
        .arg(&setup)
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_ctxmhe"))
        .current_dir(dir.path())
        .args(["--config", "config.json"])
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    let mut files = BTreeMap::new();
    snapshot(dir.path(), &mut files);
    let files = files.into_iter().map(|(p, b)| (p.strip_prefix(dir.path()).unwrap().to_path_buf(), b)).collect();
    (out.status.code().unwrap_or(-1), out.stdout, out.stderr, files)
}

#[test]
fn c8_cli_commands_are_reproducible() {
    let t = Instant::now();
    let config = r#"{"training":{"max_episodes":1,"eval_episodes":1},"suite":{"seeds":1}}"#;
    let simulate_base = ["simulate", "--env", "2", "--traj", "square", "--controller", "base", "--out", "r"];
    let commands: Vec<Vec<&str>> = vec![
        vec!["select", "--budget", "3", "--out", "sel", "--seed", "9"],
        vec!["train", "--context", "HW-L", "--out", "hw.json"],
        vec![
            "simulate",
            "--env",
            "1",
            "--traj",
            "hover",
            "--controller",
            "budget",
            "--models",
            "m",
            "--out",
            "r",
            "--dump-mhe",
            "d/mhe.csv",
        ],
        simulate_base.to_vec(),
        vec!["gradcheck", "--instances", "4", "--out", "g.csv"],
        vec!["gradcheck", "--end-to-end", "--mode", "frozen", "--samples", "6", "--steps", "2"],
        vec!["suite", "--out", "s", "--save-runs"],
    ];
    let mut failures = Vec::new();
    let mut check = |label: String, a: (i32, Vec<u8>, Vec<u8>, BTreeMap<PathBuf, Vec<u8>>), b| {
        if a != b {
            failures.push(label);
        }
        a.3.len()
    };
    let mut files = 0;
    for args in &commands {
        files += check(args[0].to_string(), run_fresh(args, config), run_fresh(args, config));
    }
    // Commands that read runs get them from a base simulation in the same
    // directory.
    for tail in [vec!["eval", "--runs", "r", "--out", "t.csv"], vec!["plot", "--runs", "r", "--out", "p"]] {
        let both = || {
            let dir = tempfile::tempdir().unwrap();
            std::fs::write(dir.path().join("config.json"), config).unwrap();
            for args in [&simulate_base[..], &tail[..]] {
                let out = Command::new(env!("CARGO_BIN_EXE_ctxmhe"))
                    .current_dir(dir.path())
                    .args(["--config", "config.json"])
                    .args(args)
                    .env("RUST_LOG", "off")
                    .output()
                    .unwrap();
                assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            }
            let out = Command::new(env!("CARGO_BIN_EXE_ctxmhe"))
                .current_dir(dir.path())
                .args(["--config", "config.json"])
                .args(&tail)
                .env("RUST_LOG", "off")
                .output()
                .unwrap();
            let mut files = BTreeMap::new();
            snapshot(dir.path(), &mut files);
            let files: BTreeMap<PathBuf, Vec<u8>> =
                files.into_iter().map(|(p, b)| (p.strip_prefix(dir.path()).unwrap().to_path_buf(), b)).collect();
            (out.status.code().unwrap_or(-1), out.stdout, out.stderr, files)
        };
        files += check(tail[0].to_string(), both(), both());
    }
    let n = commands.len() + 2;
    verdict(
        8,
        "CLI output is byte-identical on rerun",
        failures.is_empty(),
        format!("{n} commands, {files} files compared, differing: [{}]", failures.join(", ")),
        t,
    );
}
