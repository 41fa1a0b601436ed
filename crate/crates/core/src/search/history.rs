use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row per searchable group per pruning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub group_id: usize,
    /// Cumulative fraction of this group's original channels removed.
    pub group_sparsity: f64,
    pub epsilon: f64,
    pub best_q: f64,
    pub reward: f64,
    pub accuracy: f64,
    pub flops_ratio: f64,
    pub params_ratio: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Data(format!("history line {}: {e}", p.line())),
        None => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Data(format!("history: {kind:?}")),
        },
    }
}
