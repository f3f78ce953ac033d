//! Persisted run results and performance-memory curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::learners::{Method, StageResult};
use crate::membudget::{self, BudgetLedger};
use crate::metrics::{CurvePoint, PmCurve};
use crate::probes::ProbeTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub software_version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    /// Original class ids in presentation order.
    pub class_order: Vec<usize>,
    /// Total bytes every stage must fit in.
    pub target_bytes: u64,
    pub exemplar_budget: usize,
    /// One ledger per stage, taken after the stage's exemplar update.
    pub ledgers: Vec<BudgetLedger>,
    pub stages: Vec<StageResult>,
    /// Mean of stage accuracies, two decimals.
    pub average_accuracy: f64,
    pub last_accuracy: f64,
    pub probes: Option<ProbeTrace>,
}

impl RunRecord {
    /// Memory of the run in MB: the budget all stages were held to.
    pub fn memory_mb(&self) -> f64 {
        membudget::megabytes(self.target_bytes)
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Copy with every wall-time field zeroed.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        for s in &mut r.stages {
            s.wall_time_ms = 0;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Curve points of runs sharing one method and split, sorted by memory.
pub fn curve_points(records: &[RunRecord]) -> Result<PmCurve> {
    let first = records.first().ok_or_else(|| Error::contract("no runs to plot"))?;
    for r in records {
        if r.method() != first.method() {
            return Err(Error::contract(format!(
                "curve mixes methods {} and {}",
                first.method().name(),
                r.method().name()
            )));
        }
        if r.config.split != first.config.split {
            return Err(Error::contract("curve mixes task splits"));
        }
    }
    let mut points: Vec<CurvePoint> = records
        .iter()
        .map(|r| CurvePoint {
            memory_mb: r.memory_mb(),
            avg_acc: r.average_accuracy,
            last_acc: r.last_accuracy,
        })
        .collect();
    points.sort_by(|a, b| a.memory_mb.total_cmp(&b.memory_mb));
    if let Some(w) = points.windows(2).find(|w| w[0].memory_mb == w[1].memory_mb) {
        return Err(Error::contract(format!("duplicate memory point {} MB", w[0].memory_mb)));
    }
    PmCurve::new(points)
}

/// CSV `memory_mb,avg_acc,last_acc`, one row per run, ascending memory.
pub fn emit_curve(records: &[RunRecord]) -> Result<String> {
    let curve = curve_points(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve.points() {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}
