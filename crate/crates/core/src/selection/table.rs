use serde::{Deserialize, Serialize};

use super::gp::ContextPoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    /// Pool index of the training context.
    pub trained_on: usize,
    /// Loss of this model in every pool context.
    pub losses: Vec<f64>,
}

/// Model-by-context losses with the running per-context best. All values
/// are losses; performance is their negation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTable {
    pub labels: Vec<String>,
    pub points: Vec<ContextPoint>,
    pub rows: Vec<TableRow>,
    composite: Vec<f64>,
}

impl PerformanceTable {
    pub fn new(labels: Vec<String>, points: Vec<ContextPoint>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::LengthMismatch { expected: points.len(), got: labels.len() });
        }
        if points.is_empty() {
            return Err(Error::EmptyPool);
        }
        let n = points.len();
        Ok(Self { labels, points, rows: Vec::new(), composite: vec![f64::INFINITY; n] })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a model's evaluations and folds them into the composite.
    pub fn update_value(&mut self, model: impl Into<String>, trained_on: usize, losses: Vec<f64>) -> Result<()> {
        if losses.len() != self.points.len() {
            return Err(Error::Table(format!("evaluations cover {} of {} contexts", losses.len(), self.points.len())));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("table entry"));
        }
        for (c, l) in self.composite.iter_mut().zip(&losses) {
            *c = c.min(*l);
        }
        self.rows.push(TableRow { model: model.into(), trained_on, losses });
        Ok(())
    }

    /// Per-context best loss so far; `None` before any model is added.
    pub fn composite(&self) -> Option<&[f64]> {
        (!self.rows.is_empty()).then_some(&self.composite[..])
    }

    /// Uniform mean of the composite over the pool.
    pub fn aggregate(&self) -> Option<f64> {
        self.composite().map(|c| c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn nearest_context(&self, point: &ContextPoint) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - point).norm();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Row with the lowest loss at `context`; ties go to the earliest row.
    pub fn best_for(&self, context: usize) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.rows.iter().enumerate() {
            if best.is_none_or(|(_, l)| r.losses[context] < l) {
                best = Some((i, r.losses[context]));
            }
        }
        best.map(|(i, _)| i).ok_or_else(|| Error::Table("no models in table".into()))
    }

    /// Test-time model choice for an embedded context. Points outside the
    /// pool map to the nearest pool context.
    pub fn select_model_at_test(&self, point: &ContextPoint) -> Result<usize> {
        let context = self.nearest_context(point);
        if (self.points[context] - point).norm() > 0.0 {
            log::warn!("context {point:?} is not in the pool; using {}", self.labels[context]);
        }
        self.best_for(context)
    }

    /// Row with the lowest mean loss over the pool; ties go to the earliest.
    pub fn best_mean_row(&self) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.rows.iter().enumerate() {
            let m = r.losses.iter().sum::<f64>() / r.losses.len() as f64;
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((i, m));
            }
        }
        best.map(|(i, _)| i).ok_or_else(|| Error::Table("no models in table".into()))
    }

    /// Rows are models, columns are contexts.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.model);
            for l in &r.losses {
                s.push_str(&format!(",{l:.9}"));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn table(n: usize) -> PerformanceTable {
        let labels = (0..n).map(|i| format!("c{i}")).collect();
        let points = (0..n).map(|i| Vector2::new(i as f64, 0.0)).collect();
        PerformanceTable::new(labels, points).unwrap()
    }

    #[test]
    fn first_model_sets_the_composite() {
        let mut t = table(3);
        assert!(t.aggregate().is_none());
        t.update_value("a", 0, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.composite().unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.aggregate(), Some(2.0));
    }

    #[test]
    fn toy_table_matches_min_mean_oracle() {
        let mut t = table(4);
        let rows = [[0.5, 0.9, 0.2, 0.7], [0.6, 0.1, 0.8, 0.7], [0.4, 0.95, 0.3, 0.05]];
        let mut previous = f64::INFINITY;
        for (i, r) in rows.iter().enumerate() {
            t.update_value(format!("m{i}"), i, r.to_vec()).unwrap();
            let oracle: Vec<f64> =
                (0..4).map(|c| rows[..=i].iter().map(|r| r[c]).fold(f64::INFINITY, f64::min)).collect();
            assert_eq!(t.composite().unwrap(), &oracle[..]);
            let v = t.aggregate().unwrap();
            assert_eq!(v, oracle.iter().sum::<f64>() / 4.0);
            assert!(v <= previous);
            previous = v;
        }
        assert_eq!(t.best_for(0).unwrap(), 2);
        assert_eq!(t.best_for(1).unwrap(), 1);
        assert_eq!(t.best_for(3).unwrap(), 2);
    }

    #[test]
    fn ties_go_to_the_earliest_model() {
        let mut t = table(2);
        t.update_value("a", 0, vec![1.0, 1.0]).unwrap();
        t.update_value("b", 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(t.best_for(0).unwrap(), 0);
        assert_eq!(t.best_mean_row().unwrap(), 0);
    }

    #[test]
    fn off_pool_queries_use_the_nearest_context() {
        let mut t = table(3);
        t.update_value("a", 0, vec![1.0, 5.0, 1.0]).unwrap();
        t.update_value("b", 1, vec![2.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.select_model_at_test(&Vector2::new(1.2, 0.4)).unwrap(), 1);
    }

    #[test]
    fn incomplete_evaluations_are_rejected() {
        let mut t = table(3);
        assert!(t.update_value("a", 0, vec![1.0]).is_err());
        assert!(t.best_for(0).is_err());
    }
}
