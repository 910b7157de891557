//! Moving-horizon estimation of position, velocity and wind force.
//!
//! The estimator runs on the translational subsystem
//!
//! ```text
//! p⁺ = p + v·dt                         + w_p
//! v⁺ = v + (u + F/m − g·e₃)·dt          + w_v
//! F⁺ = F                                + w_F
//! y  = (p, v)
//! ```
//!
//! where `u = (f/m)·R·e₃` is the specific thrust actually applied.

mod ekf;

use std::io::Write;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ekf::{ekf_estimate, ekf_predict, ekf_update, EkfNoise};

pub const STATE_DIM: usize = 9;
pub const MEAS_DIM: usize = 6;
pub const THETA_DIM: usize = 25;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type MeasMatrix = SMatrix<f64, MEAS_DIM, STATE_DIM>;

/// Lower bound on every weight eigenvalue.
pub const WEIGHT_FLOOR: f64 = 1e-4;
/// Exclusive lower bound of the forgetting factor.
pub const GAMMA_FLOOR: f64 = 1e-3;

/// Position, velocity and translational disturbance force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState(pub StateVector);

impl AugmentedState {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, force: Vector3<f64>) -> Self {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&position);
        x.fixed_rows_mut::<3>(3).copy_from(&velocity);
        x.fixed_rows_mut::<3>(6).copy_from(&force);
        Self(x)
    }

    pub fn zeros() -> Self {
        Self(StateVector::zeros())
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn force(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(6).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Discretized translational model shared by the MHE and the EKF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranslationalModel {
    pub dt: f64,
    pub mass_kg: f64,
    pub gravity_mps2: f64,
}

impl TranslationalModel {
    pub fn validate(&self) -> Result<()> {
        if [self.dt, self.mass_kg, self.gravity_mps2].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("model dt, mass and gravity must be positive".into()))
        }
    }

    pub fn transition(&self) -> StateMatrix {
        let mut f = StateMatrix::identity();
        for i in 0..3 {
            f[(i, 3 + i)] = self.dt;
            f[(3 + i, 6 + i)] = self.dt / self.mass_kg;
        }
        f
    }

    /// Control-driven offset `b(u)` so that `x⁺ = F·x + b(u) + w`.
    pub fn input_offset(&self, u: &Vector3<f64>) -> StateVector {
        let mut b = StateVector::zeros();
        let accel = u - Vector3::new(0.0, 0.0, self.gravity_mps2);
        b.fixed_rows_mut::<3>(3).copy_from(&(accel * self.dt));
        b
    }

    pub fn predict(&self, x: &StateVector, u: &Vector3<f64>) -> StateVector {
        self.transition() * x + self.input_offset(u)
    }

    pub fn measurement_matrix() -> MeasMatrix {
        let mut h = MeasMatrix::zeros();
        for i in 0..MEAS_DIM {
            h[(i, i)] = 1.0;
        }
        h
    }

    pub fn observe(x: &StateVector) -> Vector6<f64> {
        x.fixed_rows::<6>(0).into_owned()
    }
}

/// Diagonal arrival, measurement and process weights plus the forgetting
/// factor applied to older horizon stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MheWeights {
    pub arrival: SVector<f64, STATE_DIM>,
    pub measurement: SVector<f64, MEAS_DIM>,
    pub process: SVector<f64, STATE_DIM>,
    pub gamma: f64,
}

/// Positions of each weight family inside the flattened 25-vector.
pub mod theta {
    use std::ops::Range;
    pub const ARRIVAL: Range<usize> = 0..9;
    pub const MEASUREMENT: Range<usize> = 9..15;
    pub const PROCESS: Range<usize> = 15..24;
    pub const GAMMA: usize = 24;

    pub fn name(i: usize) -> String {
        const AXES: [&str; 9] = ["px", "py", "pz", "vx", "vy", "vz", "fx", "fy", "fz"];
        if ARRIVAL.contains(&i) {
            format!("P_{}", AXES[i])
        } else if MEASUREMENT.contains(&i) {
            format!("R_{}", AXES[i - MEASUREMENT.start])
        } else if PROCESS.contains(&i) {
            format!("Q_{}", AXES[i - PROCESS.start])
        } else {
            "gamma".to_string()
        }
    }
}

impl MheWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: &f64| v.is_finite() && *v >= WEIGHT_FLOOR;
        if !self.arrival.iter().all(ok) {
            return Err(Error::NotPositiveDefinite("arrival weight".into()));
        }
        if !self.measurement.iter().all(ok) {
            return Err(Error::NotPositiveDefinite("measurement weight".into()));
        }
        if !self.process.iter().all(ok) {
            return Err(Error::NotPositiveDefinite("process weight".into()));
        }
        if !(self.gamma > GAMMA_FLOOR && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("forgetting factor {} outside (1e-3, 1]", self.gamma)));
        }
        Ok(())
    }

    pub fn from_theta(theta: &[f64]) -> Result<Self> {
        if theta.len() != THETA_DIM {
            return Err(Error::LengthMismatch { expected: THETA_DIM, got: theta.len() });
        }
        Ok(Self {
            arrival: SVector::from_column_slice(&theta[theta::ARRIVAL]),
            measurement: SVector::from_column_slice(&theta[theta::MEASUREMENT]),
            process: SVector::from_column_slice(&theta[theta::PROCESS]),
            gamma: theta[theta::GAMMA],
        })
    }

    pub fn to_theta(&self) -> [f64; THETA_DIM] {
        let mut t = [0.0; THETA_DIM];
        t[theta::ARRIVAL].copy_from_slice(self.arrival.as_slice());
        t[theta::MEASUREMENT].copy_from_slice(self.measurement.as_slice());
        t[theta::PROCESS].copy_from_slice(self.process.as_slice());
        t[theta::GAMMA] = self.gamma;
        t
    }

    /// Multiplies the three weight families by `lambda`, leaving γ alone.
    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            arrival: self.arrival * lambda,
            measurement: self.measurement * lambda,
            process: self.process * lambda,
            gamma: self.gamma,
        }
    }

    /// `γ^age`, where `age = t − k` counts stages back from the newest one.
    pub fn decay(&self, age: usize) -> f64 {
        self.gamma.powi(age as i32)
    }

    /// `d γ^age / dγ`.
    pub fn decay_derivative(&self, age: usize) -> f64 {
        if age == 0 {
            0.0
        } else {
            age as f64 * self.gamma.powi(age as i32 - 1)
        }
    }

    pub fn measurement_at(&self, age: usize) -> SVector<f64, MEAS_DIM> {
        self.measurement * self.decay(age)
    }

    pub fn process_at(&self, age: usize) -> SVector<f64, STATE_DIM> {
        self.process * self.decay(age)
    }
}

/// Measurements `y_{t−N..t}`, applied inputs `u_{t−N..t−1}` and the arrival
/// prior `x̂_{t−N}`. During start-up the window holds fewer than `horizon`
/// transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonWindow {
    pub model: TranslationalModel,
    pub horizon: usize,
    pub measurements: Vec<Vector6<f64>>,
    pub controls: Vec<Vector3<f64>>,
    pub prior: AugmentedState,
}

impl HorizonWindow {
    /// A window holding a single measurement.
    pub fn start(model: TranslationalModel, horizon: usize, first: Vector6<f64>, prior: AugmentedState) -> Self {
        Self { model, horizon, measurements: vec![first], controls: Vec::new(), prior }
    }

    /// Number of transitions currently spanned.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.horizon < 1 {
            return Err(Error::InconsistentWindow("horizon must be at least 1".into()));
        }
        if self.measurements.len() != self.controls.len() + 1 {
            return Err(Error::InconsistentWindow(format!(
                "{} measurements for {} controls",
                self.measurements.len(),
                self.controls.len()
            )));
        }
        if self.controls.len() > self.horizon {
            return Err(Error::InconsistentWindow("window longer than horizon".into()));
        }
        let finite = self.measurements.iter().all(|y| y.iter().all(|v| v.is_finite()))
            && self.controls.iter().all(|u| u.iter().all(|v| v.is_finite()))
            && self.prior.is_finite();
        if !finite {
            return Err(Error::NonFinite("horizon window"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheSolution {
    /// `x̂_{t−N|t} … x̂_{t|t}`.
    pub states: Vec<AugmentedState>,
    /// `ŵ_{t−N} … ŵ_{t−1}`.
    pub noises: Vec<StateVector>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl MheSolution {
    pub fn latest(&self) -> &AugmentedState {
        self.states.last().expect("solution holds at least one state")
    }
}

/// Breakdown of the MHE objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub arrival: f64,
    pub measurement: f64,
    pub process: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.arrival + self.measurement + self.process
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 50, relative_tolerance: 1e-10 }
    }
}

/// Propagates the decision variables `(x_{t−N}, w)` through the model.
pub fn rollout(window: &HorizonWindow, initial: &StateVector, noises: &[StateVector]) -> Vec<StateVector> {
    let f = window.model.transition();
    let mut states = Vec::with_capacity(noises.len() + 1);
    states.push(*initial);
    for (u, w) in window.controls.iter().zip(noises) {
        let prev = states.last().unwrap();
        states.push(f * prev + window.model.input_offset(u) + w);
    }
    states
}

/// Evaluates the three terms of the MHE objective at a trajectory.
pub fn cost_terms(
    window: &HorizonWindow,
    weights: &MheWeights,
    states: &[StateVector],
    noises: &[StateVector],
) -> CostTerms {
    let last = window.len();
    let dx = states[0] - window.prior.0;
    let arrival = 0.5 * dx.component_mul(&dx).dot(&weights.arrival);
    let measurement = window
        .measurements
        .iter()
        .zip(states)
        .enumerate()
        .map(|(k, (y, x))| {
            let r = y - TranslationalModel::observe(x);
            0.5 * r.component_mul(&r).dot(&weights.measurement_at(last - k))
        })
        .sum();
    let process =
        noises.iter().enumerate().map(|(k, w)| 0.5 * w.component_mul(w).dot(&weights.process_at(last - k))).sum();
    CostTerms { arrival, measurement, process }
}

/// Gradient of the objective with respect to `(x_{t−N}, w_{t−N..t−1})`,
/// accumulated by a backward adjoint pass.
fn objective_gradient(
    window: &HorizonWindow,
    weights: &MheWeights,
    states: &[StateVector],
    noises: &[StateVector],
) -> DVector<f64> {
    let n = STATE_DIM;
    let last = window.len();
    let f_t = window.model.transition().transpose();
    let h_t = TranslationalModel::measurement_matrix().transpose();
    let mut grad = DVector::zeros(n * (last + 1));
    let mut adjoint = StateVector::zeros();
    for k in (0..=last).rev() {
        let r = window.measurements[k] - TranslationalModel::observe(&states[k]);
        let stage = -(h_t * r.component_mul(&weights.measurement_at(last - k)));
        adjoint = stage + if k < last { f_t * adjoint } else { StateVector::zeros() };
        if k > 0 {
            // w_{k−1} enters x_k directly.
            let gw = adjoint + noises[k - 1].component_mul(&weights.process_at(last - (k - 1)));
            grad.rows_mut(n * k, n).copy_from(&gw);
        }
    }
    let dx0 = states[0] - window.prior.0;
    let g0 = adjoint + dx0.component_mul(&weights.arrival);
    grad.rows_mut(0, n).copy_from(&g0);
    grad
}

/// Gauss–Newton matrix of the objective in `(x_{t−N}, w)`. Block `(0, 0)`
/// couples the initial state, block `j ≥ 1` is `w_{j−1}`.
fn objective_hessian(window: &HorizonWindow, weights: &MheWeights) -> DMatrix<f64> {
    let n = STATE_DIM;
    let last = window.len();
    let f = window.model.transition();
    let f_t = f.transpose();
    let h = TranslationalModel::measurement_matrix();
    let info = |k: usize| -> StateMatrix {
        h.transpose() * SMatrix::<f64, MEAS_DIM, MEAS_DIM>::from_diagonal(&weights.measurement_at(last - k)) * h
    };

    // tail[j] = Σ_{k>j} (F^{k−1−j})ᵀ S_k F^{k−1−j}, the information that
    // w_j sees through every later measurement.
    let mut tail = vec![StateMatrix::zeros(); last];
    for j in (0..last).rev() {
        let later = if j + 1 < last { f_t * tail[j + 1] * f } else { StateMatrix::zeros() };
        tail[j] = info(j + 1) + later;
    }
    let mut powers = vec![StateMatrix::identity(); last + 1];
    for i in 1..=last {
        powers[i] = f * powers[i - 1];
    }

    let mut hess = DMatrix::zeros(n * (last + 1), n * (last + 1));
    let x0_block = info(0)
        + if last > 0 { f_t * tail[0] * f } else { StateMatrix::zeros() }
        + StateMatrix::from_diagonal(&weights.arrival);
    hess.view_mut((0, 0), (n, n)).copy_from(&x0_block);
    for j in 0..last {
        // ∂x_k/∂x_0 = F^k, ∂x_k/∂w_j = F^{k−1−j} for k > j.
        let cross = powers[j + 1].transpose() * tail[j];
        hess.view_mut((0, n * (j + 1)), (n, n)).copy_from(&cross);
        hess.view_mut((n * (j + 1), 0), (n, n)).copy_from(&cross.transpose());
        for i in 0..=j {
            let mut block = powers[j - i].transpose() * tail[j];
            if i == j {
                block += StateMatrix::from_diagonal(&weights.process_at(last - j));
            }
            hess.view_mut((n * (i + 1), n * (j + 1)), (n, n)).copy_from(&block);
            if i != j {
                hess.view_mut((n * (j + 1), n * (i + 1)), (n, n)).copy_from(&block.transpose());
            }
        }
    }
    hess
}

fn split_decision(z: &DVector<f64>, last: usize) -> (StateVector, Vec<StateVector>) {
    let n = STATE_DIM;
    let x0 = StateVector::from_iterator(z.rows(0, n).iter().copied());
    let noises = (0..last).map(|j| StateVector::from_iterator(z.rows(n * (j + 1), n).iter().copied())).collect();
    (x0, noises)
}

/// Solves the horizon problem by damped Gauss–Newton over the initial state
/// and the process noises. The model is linear, so the first full step
/// lands on the global minimum.
pub fn solve_mhe(window: &HorizonWindow, weights: &MheWeights) -> Result<MheSolution> {
    solve_mhe_with(window, weights, &SolverOptions::default())
}

pub fn solve_mhe_with(window: &HorizonWindow, weights: &MheWeights, options: &SolverOptions) -> Result<MheSolution> {
    window.validate()?;
    weights.validate()?;
    let n = STATE_DIM;
    let last = window.len();

    // Jacobi scaling keeps the factorization stable when weights span many
    // orders of magnitude.
    let mut hess = objective_hessian(window, weights);
    let scale = hess.diagonal().map(|d| 1.0 / d.sqrt());
    if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::NotPositiveDefinite("Gauss-Newton matrix".into()));
    }
    for j in 0..hess.ncols() {
        for i in 0..hess.nrows() {
            hess[(i, j)] *= scale[i] * scale[j];
        }
    }
    // A numerically singular matrix gets an escalating ridge; the line search
    // below still runs on the true objective.
    let mut ridge = 0.0;
    let chol = loop {
        let mut damped = hess.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += ridge;
        }
        if let Some(c) = damped.cholesky() {
            break c;
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
        if ridge > 1e-4 {
            return Err(Error::NotPositiveDefinite("Gauss-Newton matrix".into()));
        }
    };

    let mut z = DVector::zeros(n * (last + 1));
    z.rows_mut(0, n).copy_from(&window.prior.0);
    let (x0, noises) = split_decision(&z, last);
    let mut states = rollout(window, &x0, &noises);
    let mut noises = noises;
    let mut cost = cost_terms(window, weights, &states, &noises).total();

    let mut iterations = 0;
    let mut converged = cost == 0.0;
    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let grad = objective_gradient(window, weights, &states, &noises);
        let step = chol.solve(&(-grad).component_mul(&scale)).component_mul(&scale);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = &z + &step * alpha;
            let (tx0, tw) = split_decision(&trial, last);
            let ts = rollout(window, &tx0, &tw);
            let tc = cost_terms(window, weights, &ts, &tw).total();
            if tc <= cost {
                accepted = Some((trial, ts, tw, tc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, ts, tw, tc)) = accepted else {
            // No decrease along the Newton direction: already at the minimum
            // to machine precision.
            converged = true;
            break;
        };
        let change = (cost - tc).abs() / cost.max(f64::MIN_POSITIVE);
        z = trial;
        states = ts;
        noises = tw;
        cost = tc;
        if change < options.relative_tolerance || cost == 0.0 {
            converged = true;
        }
    }

    if !states.iter().all(|x| x.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("MHE solution"));
    }
    Ok(MheSolution { states: states.into_iter().map(AugmentedState).collect(), noises, cost, iterations, converged })
}

/// Gradient of the objective at a solution, with the dynamics substituted.
pub fn stationarity_residual(window: &HorizonWindow, weights: &MheWeights, solution: &MheSolution) -> f64 {
    let states: Vec<_> = solution.states.iter().map(|s| s.0).collect();
    objective_gradient(window, weights, &states, &solution.noises).norm()
}

/// Appends a sample. Once the window spans `horizon` transitions the oldest
/// sample is dropped and the arrival prior advances to the smoothed
/// `x̂_{t−N+1|t}` from `solution`.
pub fn slide_window(
    window: &HorizonWindow,
    new_y: Vector6<f64>,
    new_u: Vector3<f64>,
    solution: &MheSolution,
) -> HorizonWindow {
    let mut next = window.clone();
    next.measurements.push(new_y);
    next.controls.push(new_u);
    if next.controls.len() > next.horizon {
        next.measurements.remove(0);
        next.controls.remove(0);
        next.prior = solution.states[1];
    }
    next
}

/// Writes the window and its solution as CSV rows `(k, p, v, F_dist, w, y, J)`.
pub fn write_dump<W: Write>(
    out: &mut W,
    step: usize,
    window: &HorizonWindow,
    solution: &MheSolution,
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(
            out,
            "step,k,px,py,pz,vx,vy,vz,fx,fy,fz,wpx,wpy,wpz,wvx,wvy,wvz,wfx,wfy,wfz,ypx,ypy,ypz,yvx,yvy,yvz,cost"
        )?;
    }
    for (k, (x, y)) in solution.states.iter().zip(&window.measurements).enumerate() {
        let w = solution.noises.get(k).copied().unwrap_or_else(StateVector::zeros);
        let mut fields = vec![step.to_string(), k.to_string()];
        fields.extend(x.0.iter().map(|v| v.to_string()));
        fields.extend(w.iter().map(|v| v.to_string()));
        fields.extend(y.iter().map(|v| v.to_string()));
        fields.push(solution.cost.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
