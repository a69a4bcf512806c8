//! Evaluation metrics: RMSE on capacity changes, RMSE on capacity
//! (absolute and normalized), and the 2σ calibration score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptyInput("metric over zero points".to_string()));
    }
    Ok(())
}

/// Root-mean-square error between predicted and measured capacity
/// changes, Ah.
pub fn rmse_dq(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), measured.len())?;
    let sum: f64 = predicted
        .iter()
        .zip(measured)
        .map(|(p, m)| (p - m) * (p - m))
        .sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

/// RMSE between predicted and measured capacities, Ah.
pub fn rmse_q(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    rmse_dq(predicted, measured)
}

/// Normalized capacity RMSE: per-point errors divided by the measured
/// capacity, squared, averaged, rooted. Scale-invariant.
pub fn rmse_q_norm(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), measured.len())?;
    let mut sum = 0.0;
    for (p, m) in predicted.iter().zip(measured) {
        if *m == 0.0 {
            return Err(Error::ContractViolation(
                "normalized RMSE undefined for zero measured capacity".to_string(),
            ));
        }
        let e = (p - m) / m;
        sum += e * e;
    }
    Ok((sum / predicted.len() as f64).sqrt())
}

/// Fraction of measured values strictly inside the predicted ±2σ band.
/// Approximately 0.954 when the predicted uncertainties are accurate.
pub fn calibration_2sigma(mean: &[f64], sigma: &[f64], measured: &[f64]) -> Result<f64> {
    check_lengths(mean.len(), measured.len())?;
    check_lengths(mean.len(), sigma.len())?;
    if sigma.iter().any(|s| *s < 0.0) {
        return Err(Error::ContractViolation(
            "negative predicted sigma".to_string(),
        ));
    }
    let hits = mean
        .iter()
        .zip(sigma)
        .zip(measured)
        .filter(|((m, s), y)| (*m - *y).abs() < 2.0 * **s)
        .count();
    Ok(hits as f64 / mean.len() as f64)
}

/// All metrics for one model configuration on a test set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluationReport {
    pub rmse_dq: f64,
    pub rmse_q: f64,
    pub rmse_q_norm: f64,
    pub cs2_dq: f64,
    pub cs2_q: f64,
    pub n_points: usize,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<EvaluationReport> {
        serde_json::from_str(text).map_err(|e| Error::ModelLoad(e.to_string()))
    }
}

/// One row of the results table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub kernel: String,
    pub lags: usize,
    pub inputs: String,
    pub report: EvaluationReport,
}

/// Render reports as a fixed-width text table, one row per model
/// configuration.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<4} {:<10} {:<7} {:>4} {:<22} {:>10} {:>8} {:>10} {:>11} {:>8} {:>6}\n",
        "No.", "Model", "Kernel", "Lags", "Inputs", "dQ RMSE", "dQ CS2s", "Q RMSE", "Q RMSEnorm", "Q CS2s", "N"
    ));
    out.push_str(&"-".repeat(110));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let r = &row.report;
        out.push_str(&format!(
            "{:<4} {:<10} {:<7} {:>4} {:<22} {:>10.4} {:>8.3} {:>10.4} {:>11.4} {:>8.3} {:>6}\n",
            i + 1,
            row.label,
            row.kernel,
            row.lags,
            row.inputs,
            r.rmse_dq,
            r.cs2_dq,
            r.rmse_q,
            r.rmse_q_norm,
            r.cs2_q,
            r.n_points
        ));
    }
    out
}
