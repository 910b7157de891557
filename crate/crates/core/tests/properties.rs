mod common;

use common::oracles::{random_landscape, random_window};
use ctxmhe_core::control::{MotorMixer, ThrustMoment};
use ctxmhe_core::dynamics::{QuadParams, WindConfig};
use ctxmhe_core::harness::compute_metrics;
use ctxmhe_core::mhe::{cost_terms, solve_mhe, stationarity_residual};
use ctxmhe_core::selection::{
    acquisition, context_point, run_contextual_learning, AcquisitionConfig, ContextLearner, ContextPoint, GpConfig,
    GpModel, SelectionConfig, TrainedModel,
};
use ctxmhe_core::sensitivity::{directional, solution_sensitivity};
use nalgebra::{SVector, Vector2, Vector3};
use proptest::prelude::*;

fn pool_points() -> Vec<ContextPoint> {
    WindConfig::default().pool().unwrap().iter().map(context_point).collect()
}

fn point() -> impl Strategy<Value = ContextPoint> {
    (0.0..8.0f64, 0.0..2.0f64).prop_map(|(a, b)| Vector2::new(a, b))
}

struct Landscape(Vec<Vec<f64>>);

impl ContextLearner for Landscape {
    type Model = usize;

    fn train(&mut self, context: usize) -> ctxmhe_core::Result<TrainedModel<usize>> {
        Ok(TrainedModel { model: context, loss_history: vec![], converged: true })
    }

    fn evaluate(&mut self, model: &usize, context: usize) -> ctxmhe_core::Result<f64> {
        Ok(self.0[*model][context])
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gp_variance_never_grows(points in proptest::collection::vec(point(), 1..8), query in point()) {
        let mut gp = GpModel::new(GpConfig::default());
        let mut prev = gp.posterior(&query).1;
        for (i, p) in points.iter().enumerate() {
            gp.add(*p, -0.1 * i as f64).unwrap();
            let v = gp.posterior(&query).1;
            prop_assert!(v <= prev + 1e-10, "{v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn acquisition_is_non_negative(
        values in proptest::collection::vec(-2.0..0.0f64, 0..5),
        composite in proptest::collection::vec(0.0..2.0f64, 13),
        candidate in 0usize..13,
        beta in 0.0..4.0f64,
        gap in 0.0..1.0f64,
    ) {
        let pts = pool_points();
        let gp = GpModel::fit(GpConfig::default(), &pts[..values.len()], &values).unwrap();
        let cfg = AcquisitionConfig { beta, gap_slope: gap, ..Default::default() };
        let a = acquisition(&pts[candidate], &gp, Some(&composite), &pts, &cfg).unwrap();
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn selection_is_distinct_and_v_never_rises(seed in 0u64..1000, budget in 1usize..=13) {
        let pts = pool_points();
        let labels: Vec<String> = (0..pts.len()).map(|i| format!("c{i}")).collect();
        let out = run_contextual_learning(&mut Landscape(random_landscape(seed, &pts)), &labels, &pts, budget, &SelectionConfig::default()).unwrap();
        let mut sel = out.selected();
        sel.sort_unstable();
        sel.dedup();
        prop_assert_eq!(sel.len(), budget);
        for w in out.trace.windows(2) {
            prop_assert!(w[1].v_aggregate <= w[0].v_aggregate);
        }
    }

    #[test]
    fn mixing_round_trips(f in 0.0..0.6f64, mx in -1e-3..1e-3f64, my in -1e-3..1e-3f64, mz in -1e-4..1e-4f64) {
        let mixer = MotorMixer::new(&QuadParams::default()).unwrap();
        let tm = ThrustMoment { thrust: f, moment: Vector3::new(mx, my, mz) };
        let back = mixer.matrix() * mixer.mix(&tm);
        prop_assert!((back - tm.as_vector()).amax() < 1e-10);
    }

    #[test]
    fn max_ape_bounds_rmse(pairs in proptest::collection::vec(proptest::array::uniform6(-2.0..2.0f64), 1..40)) {
        let p: Vec<[f64; 3]> = pairs.iter().map(|a| [a[0], a[1], a[2]]).collect();
        let s: Vec<[f64; 3]> = pairs.iter().map(|a| [a[3], a[4], a[5]]).collect();
        let m = compute_metrics(&p, &s).unwrap();
        prop_assert!(m.max_ape_m >= m.rmse_ape_m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn uniform_weight_scaling_keeps_the_solution(seed in 0u64..10_000, lambda in 0.05..20.0f64) {
        let (window, weights) = random_window(seed, 10);
        let a = solve_mhe(&window, &weights).unwrap();
        let b = solve_mhe(&window, &weights.scaled(lambda)).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            prop_assert!((x.0 - y.0).amax() < 1e-9);
        }
        prop_assert!((b.cost - lambda * a.cost).abs() <= 1e-9 * b.cost.abs().max(1.0));
    }

    #[test]
    fn solution_is_a_global_stationary_point(seed in 0u64..10_000) {
        let (window, weights) = random_window(seed, 10);
        let sol = solve_mhe(&window, &weights).unwrap();
        prop_assert!(stationarity_residual(&window, &weights, &sol) < 1e-8);
    }

    #[test]
    fn solving_is_bit_deterministic(seed in 0u64..10_000) {
        let (window, weights) = random_window(seed, 10);
        prop_assert_eq!(solve_mhe(&window, &weights).unwrap(), solve_mhe(&window, &weights).unwrap());
    }

    #[test]
    fn more_measurement_trust_shrinks_residuals(seed in 0u64..10_000, factor in 1.0..50.0f64) {
        let (window, weights) = random_window(seed, 10);
        let mut strong = weights;
        strong.measurement *= factor;
        let residual = |w| {
            let sol = solve_mhe(&window, w).unwrap();
            let states: Vec<_> = sol.states.iter().map(|s| s.0).collect();
            cost_terms(&window, &weights, &states, &sol.noises).measurement
        };
        prop_assert!(residual(&strong) <= residual(&weights) * (1.0 + 1e-9));
    }

    #[test]
    fn uniform_scaling_is_a_null_direction(seed in 0u64..10_000) {
        let (window, weights) = random_window(seed, 10);
        let sol = solve_mhe(&window, &weights).unwrap();
        let jac = solution_sensitivity(&window, &weights, &sol).unwrap();
        let mut dir = SVector::<f64, 25>::from(weights.to_theta());
        dir[24] = 0.0;
        for d in directional(&jac, &dir) {
            prop_assert!(d.amax() < 1e-8, "{:e}", d.amax());
        }
    }
}
