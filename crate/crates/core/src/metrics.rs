//! Stage accuracies and memory-aware aggregate measures.
//!
//! Units: AUC integrates accuracy as a fraction in `[0, 1]` over memory in MB;
//! APM divides accuracy in percent by memory in MB.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounds half up to `decimals` places. Values are first snapped to a
/// micro-unit of the last place so that decimal ties like `69.975`, which
/// binary floating point stores slightly below the tie, still round up.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let snapped = (x * scale * 1e6).round() / 1e6;
    (snapped + 0.5).floor() / scale
}

/// Mean of per-stage accuracies, in percent, to two decimals.
pub fn average_accuracy(stage_accs: &[f64]) -> Result<f64> {
    if stage_accs.is_empty() {
        return Err(Error::contract("average of zero stages"));
    }
    let mean = stage_accs.iter().sum::<f64>() / stage_accs.len() as f64;
    Ok(round_half_up(mean, 2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub memory_mb: f64,
    pub avg_acc: f64,
    pub last_acc: f64,
}

/// Performance-memory curve with strictly increasing memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmCurve {
    points: Vec<CurvePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Average,
    Last,
}

impl PmCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self> {
        for p in &points {
            for acc in [p.avg_acc, p.last_acc] {
                if !(0.0..=100.0).contains(&acc) {
                    return Err(Error::contract(format!("accuracy {acc} outside [0, 100]")));
                }
            }
        }
        if points.windows(2).any(|w| w[1].memory_mb <= w[0].memory_mb) {
            return Err(Error::contract("curve memory values must strictly increase"));
        }
        Ok(PmCurve { points })
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }
}

/// Trapezoidal area under accuracy-fraction versus MB.
pub fn auc(curve: &PmCurve, which: Which) -> Result<f64> {
    let pts = curve.points();
    if pts.len() < 2 {
        return Err(Error::contract("area under a curve needs at least two points"));
    }
    let acc = |p: &CurvePoint| match which {
        Which::Average => p.avg_acc,
        Which::Last => p.last_acc,
    } / 100.0;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].memory_mb - w[0].memory_mb) * (acc(&w[0]) + acc(&w[1])) / 2.0)
        .sum())
}

/// Accuracy (percent) per MB of memory.
pub fn apm(avg_acc_pct: f64, memory_mb: f64) -> Result<f64> {
    if memory_mb.is_nan() || memory_mb <= 0.0 {
        return Err(Error::contract("accuracy per memory needs positive memory"));
    }
    Ok(avg_acc_pct / memory_mb)
}

/// For each task, accuracy when first learned minus accuracy at the final stage.
///
/// `matrix[s][t]` is the accuracy on task `t` after stage `s`; row `s` must
/// hold entries for tasks `0..=s`.
pub fn forgetting_profile(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let stages = matrix.len();
    if stages == 0 {
        return Err(Error::contract("empty accuracy matrix"));
    }
    for (s, row) in matrix.iter().enumerate() {
        if row.len() < s + 1 {
            return Err(Error::contract(format!(
                "stage {s} reports {} task accuracies, expected {}",
                row.len(),
                s + 1
            )));
        }
    }
    let last = &matrix[stages - 1];
    Ok((0..stages).map(|t| matrix[t][t] - last[t]).collect())
}

/// One metrics-table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub memory_mb: f64,
    pub avg: f64,
    pub last: f64,
    #[serde(rename = "AUC-A")]
    pub auc_a: Option<f64>,
    #[serde(rename = "AUC-L")]
    pub auc_l: Option<f64>,
    #[serde(rename = "APM-S")]
    pub apm_s: f64,
    #[serde(rename = "APM-E")]
    pub apm_e: f64,
}

/// Rows for one method's curve; AUC is absent when the curve has one point.
pub fn metrics_rows(method: &str, curve: &PmCurve) -> Result<Vec<MetricsRow>> {
    let pts = curve.points();
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::contract("metrics of an empty curve")),
    };
    let (auc_a, auc_l) = if pts.len() >= 2 {
        (Some(auc(curve, Which::Average)?), Some(auc(curve, Which::Last)?))
    } else {
        (None, None)
    };
    let apm_s = apm(first.avg_acc, first.memory_mb)?;
    let apm_e = apm(last.avg_acc, last.memory_mb)?;
    Ok(pts
        .iter()
        .map(|p| MetricsRow {
            method: method.to_string(),
            memory_mb: p.memory_mb,
            avg: p.avg_acc,
            last: p.last_acc,
            auc_a,
            auc_l,
            apm_s,
            apm_e,
        })
        .collect())
}
