//! Fixtures shared by the benchmarks.

use nalgebra::Vector3;

use ctxmhe_core::dynamics::{RigidBodyState, WindConfig, WindContext};
use ctxmhe_core::selection::{context_point, ContextPoint, PerformanceTable};

pub fn pool() -> Vec<WindContext> {
    WindConfig::default().pool().expect("default pool")
}

pub fn pool_points() -> Vec<ContextPoint> {
    pool().iter().map(context_point).collect()
}

/// A table holding `rows` models with smooth synthetic losses.
pub fn table(rows: usize) -> PerformanceTable {
    let pool = pool();
    let points = pool_points();
    let mut t = PerformanceTable::new(pool.iter().map(|c| c.label()).collect(), points.clone()).expect("table");
    for r in 0..rows {
        let losses = points.iter().map(|p| 0.1 + 0.01 * (p - points[r]).norm()).collect();
        t.update_value(pool[r].label(), r, losses).expect("row");
    }
    t
}

pub fn hover_start() -> RigidBodyState {
    RigidBodyState::at_rest(Vector3::new(0.75, 0.75, 0.5))
}
