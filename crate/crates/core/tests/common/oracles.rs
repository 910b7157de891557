//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxmhe_core::mhe::{AugmentedState, HorizonWindow, MheWeights, TranslationalModel};

type S9 = SVector<f64, 9>;
type M9 = SMatrix<f64, 9, 9>;

/// A full window of `horizon` transitions flown by a noisy double
/// integrator with a drifting force, plus positive random weights.
pub fn random_window(seed: u64, horizon: usize) -> (HorizonWindow, MheWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TranslationalModel { dt: 0.02, mass_kg: 0.033, gravity_mps2: 9.81 };
    let mut x = S9::from_fn(|_, _| rng.random_range(-0.5..0.5));
    let mut measurements = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    for k in 0..=horizon {
        let y = Vector6::from_fn(|i, _| x[i] + rng.random_range(-0.01..0.01));
        measurements.push(y);
        if k < horizon {
            let u = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                9.81 + rng.random_range(-1.0..1.0),
            );
            let w = S9::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
            x = model.predict(&x, &u) + w;
            controls.push(u);
        }
    }
    let prior = AugmentedState(S9::from_fn(|i, _| {
        measurements[0].get(i).copied().unwrap_or(0.0) + rng.random_range(-0.05..0.05)
    }));
    let mut draw = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let weights = MheWeights {
        arrival: SVector::from_fn(|_, _| draw(0.5, 50.0)),
        measurement: SVector::from_fn(|_, _| draw(10.0, 1e3)),
        process: SVector::from_fn(|_, _| draw(10.0, 1e3)),
        gamma: draw(0.6, 1.0),
    };
    let window = HorizonWindow { model, horizon, measurements, controls, prior };
    (window, weights)
}

/// Kalman filter plus Rauch–Tung–Striebel smoother over the window, with
/// weights read as inverse variances: prior covariance `diag(1/P)`,
/// measurement covariance `diag(1/(γ^{t−k} R))`, process covariance
/// `diag(1/(γ^{t−k} Q))`. The smoothed means are the window's MAP states.
pub fn rts_smoother(window: &HorizonWindow, weights: &MheWeights) -> Vec<S9> {
    let last = window.controls.len();
    let f = window.model.transition();
    let h = SMatrix::<f64, 6, 9>::from_fn(|i, j| if i == j { 1.0 } else { 0.0 });
    let decay = |k: usize| weights.gamma.powi((last - k) as i32);

    let mut x_pred = window.prior.0;
    let mut p_pred = M9::from_diagonal(&weights.arrival.map(|v| 1.0 / v));
    let mut filtered = Vec::with_capacity(last + 1);
    let mut predicted = Vec::with_capacity(last + 1);
    for k in 0..=last {
        predicted.push((x_pred, p_pred));
        let r = SMatrix::<f64, 6, 6>::from_diagonal(&weights.measurement.map(|v| 1.0 / (v * decay(k))));
        let s = h * p_pred * h.transpose() + r;
        let gain = p_pred * h.transpose() * s.try_inverse().expect("innovation covariance");
        let x_f = x_pred + gain * (window.measurements[k] - h * x_pred);
        let p_f = (M9::identity() - gain * h) * p_pred;
        filtered.push((x_f, p_f));
        if k < last {
            let q = M9::from_diagonal(&weights.process.map(|v| 1.0 / (v * decay(k))));
            x_pred = f * x_f + window.model.input_offset(&window.controls[k]);
            p_pred = f * p_f * f.transpose() + q;
        }
    }
    let mut smoothed = vec![S9::zeros(); last + 1];
    smoothed[last] = filtered[last].0;
    for k in (0..last).rev() {
        let (x_f, p_f) = filtered[k];
        let (x_p, p_p) = predicted[k + 1];
        let g = p_f * f.transpose() * p_p.try_inverse().expect("predicted covariance");
        smoothed[k] = x_f + g * (smoothed[k + 1] - x_p);
    }
    smoothed
}

pub fn rbf(a: &Vector2<f64>, b: &Vector2<f64>, length: f64, signal: f64) -> f64 {
    signal * (-(a - b).norm_squared() / (2.0 * length * length)).exp()
}

/// GP posterior by explicit inversion of the dense kernel matrix.
pub fn dense_gp(
    points: &[Vector2<f64>],
    values: &[f64],
    query: &Vector2<f64>,
    length: f64,
    signal: f64,
    noise: f64,
    prior_mean: f64,
) -> (f64, f64) {
    let n = points.len();
    if n == 0 {
        return (prior_mean, signal);
    }
    let k =
        DMatrix::from_fn(n, n, |i, j| rbf(&points[i], &points[j], length, signal) + if i == j { noise } else { 0.0 });
    let k_inv = k.try_inverse().expect("kernel matrix invertible");
    let kq = DVector::from_fn(n, |i, _| rbf(&points[i], query, length, signal));
    let y = DVector::from_fn(n, |i, _| values[i] - prior_mean);
    let mean = prior_mean + (kq.transpose() * &k_inv * y)[(0, 0)];
    let var = rbf(query, query, length, signal) - (kq.transpose() * &k_inv * &kq)[(0, 0)];
    (mean, var)
}

/// Acquisition written out term by term from the GP moments: the mean over
/// the pool of `max(0, μ + √β σ − α‖c − c′‖ − J_best(c′))`, where
/// `J_best = −composite loss`, or the floor before any model exists.
#[allow(clippy::too_many_arguments)]
pub fn brute_acquisition(
    candidate: &Vector2<f64>,
    mean: f64,
    var: f64,
    composite_loss: Option<&[f64]>,
    pool: &[Vector2<f64>],
    beta: f64,
    gap_slope: f64,
    floor: f64,
) -> f64 {
    let mut total = 0.0;
    for (i, c) in pool.iter().enumerate() {
        let best = match composite_loss {
            Some(l) => -l[i],
            None => floor,
        };
        let bracket = mean + (beta * var.max(0.0)).sqrt() - gap_slope * (candidate - c).norm() - best;
        if bracket > 0.0 {
            total += bracket;
        }
    }
    total / pool.len() as f64
}

pub struct GreedyParams {
    pub length: f64,
    pub signal: f64,
    pub noise: f64,
    pub prior_mean: f64,
    pub beta: f64,
    pub gap_slope: f64,
    pub floor: f64,
}

/// Greedy selection on a known loss landscape `loss[model][context]`:
/// every step scores each unselected candidate with the dense GP and the
/// brute-force acquisition and takes the first maximizer.
pub fn greedy_oracle(loss: &[Vec<f64>], pool: &[Vector2<f64>], budget: usize, p: &GreedyParams) -> Vec<usize> {
    let mut selected: Vec<usize> = Vec::new();
    for _ in 0..budget {
        let obs_points: Vec<_> = selected.iter().map(|&s| pool[s]).collect();
        let obs_values: Vec<_> = selected.iter().map(|&s| -loss[s][s]).collect();
        let composite: Option<Vec<f64>> = (!selected.is_empty()).then(|| {
            (0..pool.len()).map(|c| selected.iter().map(|&s| loss[s][c]).fold(f64::INFINITY, f64::min)).collect()
        });
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in pool.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let (m, v) = dense_gp(&obs_points, &obs_values, cand, p.length, p.signal, p.noise, p.prior_mean);
            let a = brute_acquisition(cand, m, v, composite.as_deref(), pool, p.beta, p.gap_slope, p.floor);
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
        selected.push(best.expect("candidate left").0);
    }
    selected
}

/// A smooth random landscape: each model is best near its own context,
/// with a random base level and a random spread.
pub fn random_landscape(seed: u64, pool: &[Vector2<f64>]) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = pool.iter().map(|_| rng.random_range(0.05..0.5)).collect();
    let spread: Vec<f64> = pool.iter().map(|_| rng.random_range(0.01..0.2)).collect();
    pool.iter()
        .enumerate()
        .map(|(m, pm)| pool.iter().map(|pc| base[m] + spread[m] * (pm - pc).norm_squared()).collect())
        .collect()
}
