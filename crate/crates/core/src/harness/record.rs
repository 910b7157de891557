use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::compute_metrics;
use crate::control::ReferencePoint;
use crate::error::{Error, Result};
use crate::mhe::THETA_DIM;
use crate::sim::StepOutput;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub controller: String,
    /// Environment id, or 0 for the straight-pass course.
    pub env: u8,
    pub trajectory: String,
    /// Hover corner or course context; 0 otherwise.
    pub stream: usize,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub rmse_ape_m: f64,
    pub max_ape_m: f64,
    pub aborted: Option<String>,
}

impl RunMetadata {
    pub fn file_stem(&self) -> String {
        format!("{}_env{}_{}_{}_seed{}", self.controller, self.env, self.trajectory, self.stream, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub t: f64,
    pub setpoint: [f64; 3],
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub est_position: [f64; 3],
    pub est_velocity: [f64; 3],
    pub est_force: [f64; 3],
    pub true_force: [f64; 3],
    pub context: String,
    pub model: String,
    pub thrust: f64,
    pub moment: [f64; 3],
    pub theta: Option<[f64; THETA_DIM]>,
}

fn arr(v: &nalgebra::Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl RunRow {
    pub fn from_step(
        out: &StepOutput,
        reference: &ReferencePoint,
        context: String,
        model: String,
        theta: Option<[f64; THETA_DIM]>,
    ) -> Self {
        Self {
            t: out.time,
            setpoint: arr(&reference.position),
            position: arr(&out.truth.position),
            velocity: arr(&out.truth.velocity),
            est_position: arr(&out.estimate.position()),
            est_velocity: arr(&out.estimate.velocity()),
            est_force: arr(&out.estimate.force()),
            true_force: arr(&out.disturbance.force),
            context,
            model,
            thrust: out.control.thrust,
            moment: arr(&out.control.moment),
            theta,
        }
    }
}

/// Metadata, setpoints, positions and times read back from a run CSV.
pub type LoadedRun = (RunMetadata, Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub meta: RunMetadata,
    pub rows: Vec<RunRow>,
}

const VEC_COLUMNS: [&str; 7] = ["ref", "p", "v", "p_est", "v_est", "f_est", "f_true"];

pub fn csv_header() -> String {
    let mut cols = vec!["t".to_string()];
    for c in VEC_COLUMNS {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{c}_{axis}"));
        }
    }
    cols.extend(["context", "model", "thrust", "m_x", "m_y", "m_z"].map(String::from));
    cols.extend((0..THETA_DIM).map(|i| format!("theta_{i}")));
    cols.join(",")
}

impl RunRecord {
    /// Fills in step count and metrics from the rows.
    pub fn new(mut meta: RunMetadata, rows: Vec<RunRow>) -> Result<Self> {
        meta.steps = rows.len();
        if rows.is_empty() {
            meta.rmse_ape_m = f64::NAN;
            meta.max_ape_m = f64::NAN;
        } else {
            let p: Vec<_> = rows.iter().map(|r| r.position).collect();
            let s: Vec<_> = rows.iter().map(|r| r.setpoint).collect();
            let m = compute_metrics(&p, &s)?;
            meta.rmse_ape_m = m.rmse_ape_m;
            meta.max_ape_m = m.max_ape_m;
        }
        Ok(Self { meta, rows })
    }

    pub fn ape(&self) -> Vec<f64> {
        let p: Vec<_> = self.rows.iter().map(|r| r.position).collect();
        let s: Vec<_> = self.rows.iter().map(|r| r.setpoint).collect();
        compute_metrics(&p, &s).map(|m| m.ape).unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut out = csv_header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.t);
            for v in
                [&r.setpoint, &r.position, &r.velocity, &r.est_position, &r.est_velocity, &r.est_force, &r.true_force]
            {
                for x in v {
                    let _ = write!(out, ",{x}");
                }
            }
            let _ = write!(out, ",{},{},{}", r.context, r.model, r.thrust);
            for x in &r.moment {
                let _ = write!(out, ",{x}");
            }
            match &r.theta {
                Some(th) => th.iter().for_each(|x| {
                    let _ = write!(out, ",{x}");
                }),
                None => out.push_str(&",".repeat(THETA_DIM)),
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let stem = self.meta.file_stem();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(csv)
    }

    /// Reads the sidecar and the setpoint/position columns of the CSV.
    pub fn load(csv: &Path) -> Result<LoadedRun> {
        let meta: RunMetadata = serde_json::from_str(&std::fs::read_to_string(csv.with_extension("json"))?)?;
        let text = std::fs::read_to_string(csv)?;
        let mut lines = text.lines();
        if lines.next() != Some(csv_header().as_str()) {
            return Err(Error::Config(format!("{} is not a run record", csv.display())));
        }
        let (mut setpoints, mut positions, mut times) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad field {i} in {}", csv.display())))
            };
            times.push(num(0)?);
            setpoints.push([num(1)?, num(2)?, num(3)?]);
            positions.push([num(4)?, num(5)?, num(6)?]);
        }
        Ok((meta, setpoints, positions, times))
    }
}

/// All run-record CSVs in `dir`, sorted by name.
pub fn list_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && p.with_extension("json").exists())
        .collect();
    out.sort();
    Ok(out)
}
