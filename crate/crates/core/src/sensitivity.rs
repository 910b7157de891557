//! Analytic sensitivity of the MHE solution with respect to its weights.
//!
//! Differentiating the KKT conditions of the horizon problem yields an
//! auxiliary linear-quadratic estimation problem whose solution is
//! `∂x̂/∂θ`. It is solved by a Kalman filter forward pass followed by a
//! backward pass over the dual variables.
//!
//! Sign convention: `S_k = −HᵀR_kH` and `T_k = −∂²J/∂x∂θ` are the negated
//! Hessian blocks of the stage cost, which makes `C_k = (I − P_kS_k)⁻¹P_k`
//! the posterior covariance of the auxiliary filter.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::mhe::{
    theta, HorizonWindow, MheSolution, MheWeights, StateMatrix, TranslationalModel, MEAS_DIM, STATE_DIM, THETA_DIM,
};

pub type ThetaJacobian = SMatrix<f64, STATE_DIM, THETA_DIM>;

/// Largest tolerated 1-norm condition number of `I − P_kS_k`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBundle {
    /// `F̄_k = ∂f/∂x`, for `k = t−N … t−1`.
    pub transition: Vec<StateMatrix>,
    /// `G_k = ∂f/∂w`, for `k = t−N … t−1`.
    pub noise_input: Vec<StateMatrix>,
    /// `S_k`, for `k = t−N … t`.
    pub info: Vec<StateMatrix>,
    /// `T_k`, for `k = t−N … t`.
    pub mixed: Vec<ThetaJacobian>,
    /// `L^ww_k = Q_k`, for `k = t−N … t−1`.
    pub noise_hessian: Vec<StateMatrix>,
    /// `L^wθ_k`, for `k = t−N … t−1`.
    pub noise_mixed: Vec<ThetaJacobian>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySolution {
    /// `X̂_{k|t} = ∂x̂_{k|t}/∂θ`.
    pub states: Vec<ThetaJacobian>,
    /// `X̂^KF_{k|k}`.
    pub filtered: Vec<ThetaJacobian>,
    /// `C_k`.
    pub correction: Vec<StateMatrix>,
    /// `P_k`.
    pub predicted_cov: Vec<StateMatrix>,
    /// `Λ*_k`, with `Λ*_t = 0` last.
    pub duals: Vec<ThetaJacobian>,
}

/// Linearizes the KKT system of the horizon problem at `sol`.
pub fn build_sensitivity_bundle(
    window: &HorizonWindow,
    weights: &MheWeights,
    sol: &MheSolution,
) -> Result<SensitivityBundle> {
    if !sol.converged {
        return Err(Error::NotConverged);
    }
    let last = window.len();
    if sol.states.len() != last + 1 || sol.noises.len() != last {
        return Err(Error::LengthMismatch { expected: last + 1, got: sol.states.len() });
    }
    let h = TranslationalModel::measurement_matrix();
    let f = window.model.transition();

    let mut info = Vec::with_capacity(last + 1);
    let mut mixed = Vec::with_capacity(last + 1);
    for k in 0..=last {
        let age = last - k;
        let r_k = weights.measurement_at(age);
        info.push(-(h.transpose() * SMatrix::<f64, MEAS_DIM, MEAS_DIM>::from_diagonal(&r_k) * h));

        let residual = window.measurements[k] - TranslationalModel::observe(&sol.states[k].0);
        let mut t_k = ThetaJacobian::zeros();
        // ∂R_k/∂R_i = γ^age e_i e_iᵀ; Hᵀ places row i of the residual on state i.
        for i in 0..MEAS_DIM {
            t_k[(i, theta::MEASUREMENT.start + i)] = weights.decay(age) * residual[i];
        }
        let d_gamma = weights.decay_derivative(age);
        for i in 0..MEAS_DIM {
            t_k[(i, theta::GAMMA)] = d_gamma * weights.measurement[i] * residual[i];
        }
        if k == 0 {
            let dx = sol.states[0].0 - window.prior.0;
            for i in 0..STATE_DIM {
                t_k[(i, theta::ARRIVAL.start + i)] = -dx[i];
            }
        }
        mixed.push(t_k);
    }

    let mut noise_hessian = Vec::with_capacity(last);
    let mut noise_mixed = Vec::with_capacity(last);
    for (k, w) in sol.noises.iter().enumerate() {
        let age = last - k;
        noise_hessian.push(StateMatrix::from_diagonal(&weights.process_at(age)));
        let mut l = ThetaJacobian::zeros();
        for i in 0..STATE_DIM {
            l[(i, theta::PROCESS.start + i)] = weights.decay(age) * w[i];
            l[(i, theta::GAMMA)] = weights.decay_derivative(age) * weights.process[i] * w[i];
        }
        noise_mixed.push(l);
    }

    Ok(SensitivityBundle {
        transition: vec![f; last],
        noise_input: vec![StateMatrix::identity(); last],
        info,
        mixed,
        noise_hessian,
        noise_mixed,
    })
}

fn one_norm(m: &StateMatrix) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `C = (I − P·S)⁻¹ P`, refusing near-singular systems.
fn correction(p: &StateMatrix, s: &StateMatrix, step: usize) -> Result<StateMatrix> {
    let a = StateMatrix::identity() - p * s;
    let inv = a.try_inverse().ok_or(Error::IllConditioned { step, condition: f64::INFINITY })?;
    let condition = one_norm(&a) * one_norm(&inv);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { step, condition });
    }
    Ok(inv * p)
}

fn diagonal_inverse(m: &StateMatrix, step: usize) -> Result<StateMatrix> {
    let d = m.diagonal();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::IllConditioned { step, condition: f64::INFINITY });
    }
    Ok(StateMatrix::from_diagonal(&d.map(|v| 1.0 / v)))
}

/// Runs the forward filter and backward dual recursion. `prior_sensitivity`
/// is `∂x̂_{t−N}/∂θ` of the arrival prior; pass zero when the prior does not
/// depend on θ.
pub fn kf_sensitivity_with_prior(
    bundle: &SensitivityBundle,
    weights: &MheWeights,
    prior_sensitivity: &ThetaJacobian,
) -> Result<SensitivitySolution> {
    let last = bundle.info.len().checked_sub(1).ok_or(Error::LengthMismatch { expected: 1, got: 0 })?;
    if bundle.mixed.len() != last + 1
        || bundle.transition.len() != last
        || bundle.noise_input.len() != last
        || bundle.noise_hessian.len() != last
        || bundle.noise_mixed.len() != last
    {
        return Err(Error::LengthMismatch { expected: last, got: bundle.transition.len() });
    }
    let ident = StateMatrix::identity();

    let p0 = StateMatrix::from_diagonal(&weights.arrival.map(|v| 1.0 / v));
    let c0 = correction(&p0, &bundle.info[0], 0)?;
    let mut filtered = vec![(ident + c0 * bundle.info[0]) * prior_sensitivity + c0 * bundle.mixed[0]];
    let mut corrections = vec![c0];
    let mut predicted_cov = vec![p0];

    for k in 1..=last {
        let f = &bundle.transition[k - 1];
        let g = &bundle.noise_input[k - 1];
        let lww_inv = diagonal_inverse(&bundle.noise_hessian[k - 1], k - 1)?;
        let predicted = f * filtered[k - 1] - g * lww_inv * bundle.noise_mixed[k - 1];
        let p = f * corrections[k - 1] * f.transpose() + g * lww_inv * g.transpose();
        let c = correction(&p, &bundle.info[k], k)?;
        filtered.push((ident + c * bundle.info[k]) * predicted + c * bundle.mixed[k]);
        corrections.push(c);
        predicted_cov.push(p);
    }

    // duals[k] = Λ*_k, the multiplier of the transition k → k+1.
    let mut duals = vec![ThetaJacobian::zeros(); last + 1];
    for k in (1..=last).rev() {
        let propagated = if k < last {
            (ident + bundle.info[k] * corrections[k]) * bundle.transition[k].transpose() * duals[k]
        } else {
            ThetaJacobian::zeros()
        };
        duals[k - 1] = propagated + bundle.info[k] * filtered[k] + bundle.mixed[k];
    }

    let states: Vec<ThetaJacobian> = (0..=last)
        .map(|k| {
            if k < last {
                filtered[k] + corrections[k] * bundle.transition[k].transpose() * duals[k]
            } else {
                filtered[k]
            }
        })
        .collect();

    if states.iter().chain(&duals).any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("sensitivity recursion"));
    }
    Ok(SensitivitySolution { states, filtered, correction: corrections, predicted_cov, duals })
}

/// `∂x̂_{k|t}/∂θ` for every stage of the window, with a θ-independent prior.
pub fn kf_sensitivity(
    bundle: &SensitivityBundle,
    weights: &MheWeights,
    window: &HorizonWindow,
    sol: &MheSolution,
) -> Result<SensitivitySolution> {
    if bundle.info.len() != window.len() + 1 || sol.states.len() != window.len() + 1 {
        return Err(Error::LengthMismatch { expected: window.len() + 1, got: bundle.info.len() });
    }
    kf_sensitivity_with_prior(bundle, weights, &ThetaJacobian::zeros())
}

/// Convenience wrapper: bundle plus recursion.
pub fn solution_sensitivity(
    window: &HorizonWindow,
    weights: &MheWeights,
    sol: &MheSolution,
) -> Result<Vec<ThetaJacobian>> {
    let bundle = build_sensitivity_bundle(window, weights, sol)?;
    Ok(kf_sensitivity(&bundle, weights, window, sol)?.states)
}

/// Directional derivative of every stage along `direction` in θ-space.
pub fn directional(states: &[ThetaJacobian], direction: &SVector<f64, THETA_DIM>) -> Vec<SVector<f64, STATE_DIM>> {
    states.iter().map(|x| x * direction).collect()
}
