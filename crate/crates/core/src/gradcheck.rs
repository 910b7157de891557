//! Finite-difference verification of the analytic MHE sensitivities.

use nalgebra::{SVector, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::mhe::{
    solve_mhe, theta, AugmentedState, HorizonWindow, MheWeights, StateVector, TranslationalModel, THETA_DIM,
};
use crate::seed;
use crate::sensitivity::{solution_sensitivity, ThetaJacobian};

/// A random window drawn from the translational model with process and
/// measurement noise, and random weights spread over two decades.
pub fn random_instance(seed_value: u64, horizon: usize) -> (HorizonWindow, MheWeights) {
    let mut rng = seed::rng(seed_value, &[0x6c]);
    let model = TranslationalModel { dt: 0.02, mass_kg: 0.033, gravity_mps2: 9.81 };
    let mut normal = |s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
    let x0 = AugmentedState::new(
        Vector3::new(normal(0.5), normal(0.5), 0.5 + normal(0.1)),
        Vector3::new(normal(0.3), normal(0.3), normal(0.1)),
        Vector3::new(normal(0.1), normal(0.1), normal(0.05)),
    );
    let mut x = x0.0;
    let mut measurements = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    measurements.push(TranslationalModel::observe(&x) + Vector6::from_fn(|_, _| normal(0.01)));
    for _ in 0..horizon {
        let u = Vector3::new(normal(0.5), normal(0.5), 9.81 + normal(0.5));
        let w = StateVector::from_fn(|i, _| normal(if i < 3 { 1e-3 } else { 5e-3 }));
        x = model.predict(&x, &u) + w;
        controls.push(u);
        measurements.push(TranslationalModel::observe(&x) + Vector6::from_fn(|_, _| normal(0.01)));
    }
    let prior = AugmentedState(x0.0 + StateVector::from_fn(|_, _| normal(0.02)));
    let window = HorizonWindow { model, horizon, measurements, controls, prior };

    let mut rng = seed::rng(seed_value, &[0x77]);
    let mut log_uniform = || 10f64.powf(rng.random_range(-1.0..1.0));
    let arrival = SVector::from_fn(|_, _| log_uniform());
    let measurement = SVector::from_fn(|_, _| log_uniform());
    let process = SVector::from_fn(|_, _| log_uniform());
    let gamma = seed::rng(seed_value, &[0x99]).random_range(0.7..1.0);
    (window, MheWeights { arrival, measurement, process, gamma })
}

/// Central finite differences of the MHE solution in θ.
pub fn finite_difference_sensitivity(
    window: &HorizonWindow,
    weights: &MheWeights,
    step: f64,
) -> Result<Vec<ThetaJacobian>> {
    let base = weights.to_theta();
    let stages = window.len() + 1;
    let mut out = vec![ThetaJacobian::zeros(); stages];
    for j in 0..THETA_DIM {
        let mut plus = base;
        let mut minus = base;
        plus[j] += step;
        minus[j] -= step;
        let sp = solve_mhe(window, &MheWeights::from_theta(&plus)?)?;
        let sm = solve_mhe(window, &MheWeights::from_theta(&minus)?)?;
        for (k, o) in out.iter_mut().enumerate().take(stages) {
            o.set_column(j, &((sp.states[k].0 - sm.states[k].0) / (2.0 * step)));
        }
    }
    Ok(out)
}

/// Per-component comparison across all stages of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentError {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Relative error of column `j`: `‖A_j − D_j‖_∞ / max(‖D_j‖_∞, floor)`.
pub fn compare(analytic: &[ThetaJacobian], numeric: &[ThetaJacobian], floor: f64) -> Vec<ComponentError> {
    (0..THETA_DIM)
        .map(|j| {
            let mut diff: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for (a, d) in analytic.iter().zip(numeric) {
                diff = diff.max((a.column(j) - d.column(j)).amax());
                scale = scale.max(d.column(j).amax());
            }
            ComponentError { max_abs: diff, max_rel: diff / scale.max(floor) }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub component: usize,
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,name,max_rel_err,max_abs_err,instances,pass\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6e},{:.6e},{},{}\n",
                r.component,
                r.name,
                r.max_rel_err,
                r.max_abs_err,
                r.instances,
                r.max_rel_err < self.tolerance
            ));
        }
        s
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;
const SCALE_FLOOR: f64 = 1e-9;

/// Runs the finite-difference suite over `instances` random windows.
pub fn run_gradcheck(instances: usize, horizon: usize, base_seed: u64) -> Result<GradcheckReport> {
    let mut worst = vec![ComponentError { max_abs: 0.0, max_rel: 0.0 }; THETA_DIM];
    for i in 0..instances {
        let (window, weights) = random_instance(seed::derive(base_seed, &[i as u64]), horizon);
        let sol = solve_mhe(&window, &weights)?;
        let analytic = solution_sensitivity(&window, &weights, &sol)?;
        let numeric = finite_difference_sensitivity(&window, &weights, FD_STEP)?;
        for (w, e) in worst.iter_mut().zip(compare(&analytic, &numeric, SCALE_FLOOR)) {
            w.max_abs = w.max_abs.max(e.max_abs);
            w.max_rel = w.max_rel.max(e.max_rel);
        }
    }
    let rows = worst
        .into_iter()
        .enumerate()
        .map(|(j, e)| GradcheckRow {
            component: j,
            name: theta::name(j),
            max_rel_err: e.max_rel,
            max_abs_err: e.max_abs,
            instances,
        })
        .collect();
    Ok(GradcheckReport { rows, tolerance: FD_TOLERANCE })
}
