use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A context embedded as `(direction_code, speed_level)`.
pub type ContextPoint = Vector2<f64>;

pub const MAX_KERNEL_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub prior_mean: f64,
    /// Largest diagonal jitter tried before giving up.
    pub max_jitter: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { length_scale: 1.0, signal_variance: 1.0, noise_variance: 1e-6, prior_mean: 0.0, max_jitter: 1e-2 }
    }
}

impl GpConfig {
    pub fn kernel(&self, a: &ContextPoint, b: &ContextPoint) -> f64 {
        let d2 = (a - b).norm_squared();
        self.signal_variance * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Exact GP regression with an RBF kernel and fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub config: GpConfig,
    points: Vec<ContextPoint>,
    values: Vec<f64>,
    /// Diagonal actually added to `K`: the noise variance, escalated if
    /// needed.
    diagonal: f64,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn new(config: GpConfig) -> Self {
        Self {
            config,
            points: Vec::new(),
            values: Vec::new(),
            diagonal: config.noise_variance,
            factor: None,
            alpha: DVector::zeros(0),
        }
    }

    pub fn fit(config: GpConfig, points: &[ContextPoint], values: &[f64]) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::LengthMismatch { expected: points.len(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GP observation"));
        }
        let mut gp = Self::new(config);
        gp.points = points.to_vec();
        gp.values = values.to_vec();
        gp.refactor()?;
        Ok(gp)
    }

    pub fn add(&mut self, point: ContextPoint, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("GP observation"));
        }
        self.points.push(point);
        self.values.push(value);
        self.refactor()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn diagonal(&self) -> f64 {
        self.diagonal
    }

    fn refactor(&mut self) -> Result<()> {
        let n = self.points.len();
        if n == 0 {
            self.factor = None;
            self.alpha = DVector::zeros(0);
            return Ok(());
        }
        let k = DMatrix::from_fn(n, n, |i, j| self.config.kernel(&self.points[i], &self.points[j]));
        let mut diagonal = self.config.noise_variance;
        let mut cond = condition_number(&(&k + DMatrix::identity(n, n) * diagonal));
        while cond > MAX_KERNEL_CONDITION {
            diagonal = if diagonal > 0.0 { diagonal * 10.0 } else { 1e-10 };
            if diagonal > self.config.max_jitter {
                return Err(Error::IllConditionedKernel(cond));
            }
            cond = condition_number(&(&k + DMatrix::identity(n, n) * diagonal));
        }
        if diagonal != self.config.noise_variance {
            log::warn!("GP kernel jitter raised to {diagonal:e}");
        }
        let factor = (k + DMatrix::identity(n, n) * diagonal)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("GP kernel matrix".into()))?;
        let y = DVector::from_iterator(n, self.values.iter().map(|v| v - self.config.prior_mean));
        self.alpha = factor.solve(&y);
        self.factor = Some(factor);
        self.diagonal = diagonal;
        Ok(())
    }

    /// Posterior mean and variance at `query`.
    pub fn posterior(&self, query: &ContextPoint) -> (f64, f64) {
        let prior_var = self.config.kernel(query, query);
        let Some(factor) = &self.factor else {
            return (self.config.prior_mean, prior_var);
        };
        let kq = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| self.config.kernel(p, query)));
        let mean = self.config.prior_mean + kq.dot(&self.alpha);
        let v = factor.l().solve_lower_triangular(&kq).expect("non-singular factor");
        (mean, (prior_var - v.norm_squared()).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_returns_the_prior() {
        let gp = GpModel::new(GpConfig { prior_mean: -0.5, ..Default::default() });
        assert_eq!(gp.posterior(&Vector2::new(3.0, 1.0)), (-0.5, 1.0));
    }

    #[test]
    fn interpolates_without_noise() {
        let cfg = GpConfig { noise_variance: 0.0, ..Default::default() };
        let pts = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 2.0), Vector2::new(4.0, 1.0)];
        let vals = [0.3, -1.2, 0.8];
        let gp = GpModel::fit(cfg, &pts, &vals).unwrap();
        for (p, v) in pts.iter().zip(vals) {
            let (m, s2) = gp.posterior(p);
            assert!((m - v).abs() < 1e-10 && s2 < 1e-10);
        }
    }

    #[test]
    fn duplicate_points_trigger_jitter() {
        let cfg = GpConfig { noise_variance: 0.0, ..Default::default() };
        let p = Vector2::new(1.0, 1.0);
        let gp = GpModel::fit(cfg, &[p, p], &[1.0, 1.0]).unwrap();
        assert!(gp.diagonal() > 0.0 && gp.diagonal() <= 1e-2);
    }

    #[test]
    fn hopeless_conditioning_is_reported() {
        let cfg = GpConfig { noise_variance: 0.0, max_jitter: 1e-11, ..Default::default() };
        let p = Vector2::new(1.0, 1.0);
        assert!(matches!(GpModel::fit(cfg, &[p, p], &[1.0, 2.0]), Err(Error::IllConditionedKernel(_))));
    }
}
