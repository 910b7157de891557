//! Spatial wind layouts: which context is active where.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::WindContext;
use crate::error::{Error, Result};

/// Maps a position to the wind context blowing there.
pub trait ContextMap {
    /// Index into the context pool, or `None` for calm air.
    fn context_at(&self, position: &Vector3<f64>) -> Option<usize>;
}

/// The same context everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformField(pub usize);

impl ContextMap for UniformField {
    fn context_at(&self, _: &Vector3<f64>) -> Option<usize> {
        Some(self.0)
    }
}

/// One context inside `x_min ≤ x ≤ x_max`, calm elsewhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowBand {
    pub context: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl ContextMap for FlowBand {
    fn context_at(&self, p: &Vector3<f64>) -> Option<usize> {
        (p.x >= self.x_min && p.x <= self.x_max).then_some(self.context)
    }
}

/// Quadrant layout given by `(direction_code, level_code)` pairs in the
/// order SW, SE, NE, NW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub id: u8,
    pub quadrants: [(u8, u8); 4],
}

impl EnvironmentSpec {
    pub fn defaults() -> Vec<EnvironmentSpec> {
        vec![
            EnvironmentSpec { id: 1, quadrants: [(0, 0), (1, 2), (1, 1), (0, 0)] },
            EnvironmentSpec { id: 2, quadrants: [(3, 2), (0, 0), (2, 1), (0, 0)] },
            EnvironmentSpec { id: 3, quadrants: [(5, 1), (0, 0), (6, 2), (3, 1)] },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub id: u8,
    pub volume: Vector3<f64>,
    /// Pool indices in the order SW, SE, NE, NW.
    pub quadrants: [usize; 4],
    /// Width of the calm band along the interior quadrant boundaries.
    pub margin_m: f64,
}

impl Environment {
    pub fn resolve(spec: &EnvironmentSpec, pool: &[WindContext], volume: Vector3<f64>, margin_m: f64) -> Result<Self> {
        if !(margin_m >= 0.0) {
            return Err(Error::Config("quadrant margin must be non-negative".into()));
        }
        let mut quadrants = [0; 4];
        for (q, &codes) in quadrants.iter_mut().zip(&spec.quadrants) {
            *q = pool
                .iter()
                .position(|c| c.codes() == codes)
                .ok_or(Error::InvalidContext { direction: codes.0, level: codes.1 })?;
        }
        Ok(Self { id: spec.id, volume, quadrants, margin_m })
    }

    /// Quadrant index 0..4 (SW, SE, NE, NW); points outside the volume map to
    /// the nearest quadrant.
    pub fn quadrant(&self, p: &Vector3<f64>) -> usize {
        let east = p.x >= self.volume.x / 2.0;
        let north = p.y >= self.volume.y / 2.0;
        match (east, north) {
            (false, false) => 0,
            (true, false) => 1,
            (true, true) => 2,
            (false, true) => 3,
        }
    }
}

impl ContextMap for Environment {
    fn context_at(&self, p: &Vector3<f64>) -> Option<usize> {
        let (cx, cy) = (self.volume.x / 2.0, self.volume.y / 2.0);
        if self.margin_m > 0.0 && ((p.x - cx).abs() < self.margin_m || (p.y - cy).abs() < self.margin_m) {
            return None;
        }
        Some(self.quadrants[self.quadrant(p)])
    }
}
