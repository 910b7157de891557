use nalgebra::{SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{AugmentedState, StateMatrix, TranslationalModel, MEAS_DIM, STATE_DIM};
use crate::dynamics::Measurement;
use crate::error::{Error, Result};

/// Standard deviations of the process and measurement noise assumed by the
/// filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfNoise {
    pub process_std: [f64; STATE_DIM],
    pub measurement_std: [f64; MEAS_DIM],
}

impl Default for EkfNoise {
    fn default() -> Self {
        Self {
            process_std: [1e-3, 1e-3, 1e-3, 6e-3, 6e-3, 6e-3, 1e-2, 1e-2, 1e-2],
            measurement_std: [1e-2, 1e-2, 1e-2, 2e-2, 2e-2, 2e-2],
        }
    }
}

impl EkfNoise {
    pub fn process_covariance(&self) -> StateMatrix {
        StateMatrix::from_diagonal(&SVector::from(self.process_std).map(|s| s * s))
    }

    pub fn measurement_covariance(&self) -> SMatrix<f64, MEAS_DIM, MEAS_DIM> {
        SMatrix::from_diagonal(&SVector::from(self.measurement_std).map(|s| s * s))
    }
}

fn symmetrize(p: &StateMatrix) -> StateMatrix {
    (p + p.transpose()) * 0.5
}

pub fn ekf_predict(
    prev: &AugmentedState,
    prev_cov: &StateMatrix,
    u: &Vector3<f64>,
    model: &TranslationalModel,
    noise: &EkfNoise,
) -> (AugmentedState, StateMatrix) {
    let f = model.transition();
    let x = model.predict(&prev.0, u);
    let p = symmetrize(&(f * prev_cov * f.transpose() + noise.process_covariance()));
    (AugmentedState(x), p)
}

pub fn ekf_update(
    predicted: &AugmentedState,
    predicted_cov: &StateMatrix,
    y: &Vector6<f64>,
    noise: &EkfNoise,
) -> Result<(AugmentedState, StateMatrix)> {
    let h = TranslationalModel::measurement_matrix();
    let innovation = y - TranslationalModel::observe(&predicted.0);
    let s = h * predicted_cov * h.transpose() + noise.measurement_covariance();
    let s_inv = s.cholesky().ok_or(Error::SingularInnovation)?.inverse();
    let gain = predicted_cov * h.transpose() * s_inv;
    let x = predicted.0 + gain * innovation;
    // Joseph form keeps the covariance symmetric positive definite.
    let i_kh = StateMatrix::identity() - gain * h;
    let p = i_kh * predicted_cov * i_kh.transpose() + gain * noise.measurement_covariance() * gain.transpose();
    Ok((AugmentedState(x), symmetrize(&p)))
}

/// One predict–update cycle on the translational model.
pub fn ekf_estimate(
    prev: &AugmentedState,
    prev_cov: &StateMatrix,
    u: &Vector3<f64>,
    y: &Measurement,
    model: &TranslationalModel,
    noise: &EkfNoise,
) -> Result<(AugmentedState, StateMatrix)> {
    if prev_cov.cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("EKF covariance".into()));
    }
    let (x, p) = ekf_predict(prev, prev_cov, u, model, noise);
    ekf_update(&x, &p, &y.y, noise)
}
