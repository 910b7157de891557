//! On-disk layout of a trained model set:
//!
//! - `models.json`: manifest with the performance table and checkpoint names
//! - `table.csv`: the table, rows are models and columns are contexts
//! - `trace.json`: one entry per selection step
//! - `<label>.json`: one checkpoint per trained context

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelSet;
use crate::error::{Error, Result};
use crate::network::Checkpoint;
use crate::selection::{PerformanceTable, TraceStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub table: PerformanceTable,
    pub checkpoints: Vec<String>,
}

pub fn checkpoint_name(label: &str) -> String {
    format!("{label}.json")
}

pub fn save(
    dir: &Path,
    config_hash: &str,
    seed: u64,
    table: &PerformanceTable,
    checkpoints: &[Checkpoint],
    trace: &[TraceStep],
) -> Result<()> {
    if checkpoints.len() != table.rows.len() {
        return Err(Error::LengthMismatch { expected: table.rows.len(), got: checkpoints.len() });
    }
    std::fs::create_dir_all(dir)?;
    let names: Vec<String> = table.rows.iter().map(|r| checkpoint_name(&r.model)).collect();
    for (name, c) in names.iter().zip(checkpoints) {
        c.save(&dir.join(name))?;
    }
    let manifest = Manifest { config_hash: config_hash.into(), seed, table: table.clone(), checkpoints: names };
    std::fs::write(dir.join("models.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    std::fs::write(dir.join("table.csv"), table.to_csv())?;
    std::fs::write(dir.join("trace.json"), serde_json::to_string_pretty(trace)? + "\n")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Manifest, ModelSet)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("models.json"))?)?;
    let nets = manifest
        .checkpoints
        .iter()
        .map(|name| Checkpoint::load(&dir.join(name))?.network())
        .collect::<Result<Vec<_>>>()?;
    let set = ModelSet::new(manifest.table.clone(), nets)?;
    Ok((manifest, set))
}
