//! The transition model: train a regressor on (feature, capacity change)
//! pairs pooled across training cells, then roll predictions forward over
//! a test cell's load patterns, integrating the predicted changes into a
//! capacity trajectory with propagated credible bands.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data_ingest::{segment_load_patterns, CellRecord};
use crate::error::{Error, Result};
use crate::features::{
    build_dataset, extract_features, stack_lags, FeatureSpec, FeatureVector, Scaler,
};
use crate::gboost::{self, BoostConfig, QuantileEnsemble};
use crate::gp_core::{FitOptions, GpModel, GpModelRecord, KernelConfig, KernelFamily};
use crate::metrics::{self, EvaluationReport};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Which regression backend a model configuration uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regressor {
    Gp { family: KernelFamily },
    Gboost,
}

/// One model configuration: regressor plus feature mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub regressor: Regressor,
    pub feature_spec: FeatureSpec,
}

fn preset_spec(use_abs_time: bool, lags: usize) -> FeatureSpec {
    match (use_abs_time, lags) {
        (false, _) => FeatureSpec::usage_history(lags),
        (true, 1) => FeatureSpec::usage_with_elapsed_time(),
        (true, _) => FeatureSpec {
            use_abs_time: true,
            ..FeatureSpec::usage_history(lags)
        },
    }
}

impl ModelConfig {
    /// The six standard configurations, in order:
    ///
    /// 1. GP Matérn 5/2, 6 lags, Δt + Q_thru
    /// 2. GP Matérn 5/2, 1 lag, Δt + Q_thru + t
    /// 3. GP linear, 6 lags, Δt + Q_thru
    /// 4. GP linear, 1 lag, Δt + Q_thru + t
    /// 5. Gradient boosting, 6 lags, Δt + Q_thru + t
    /// 6. Gradient boosting, 1 lag, Δt + Q_thru
    pub fn preset(number: usize) -> Option<ModelConfig> {
        let (regressor, use_abs_time, lags) = match number {
            1 => (Regressor::Gp { family: KernelFamily::Matern52 }, false, 6),
            2 => (Regressor::Gp { family: KernelFamily::Matern52 }, true, 1),
            3 => (Regressor::Gp { family: KernelFamily::Linear }, false, 6),
            4 => (Regressor::Gp { family: KernelFamily::Linear }, true, 1),
            5 => (Regressor::Gboost, true, 6),
            6 => (Regressor::Gboost, false, 1),
            _ => return None,
        };
        Some(ModelConfig {
            name: format!("model{number}"),
            regressor,
            feature_spec: preset_spec(use_abs_time, lags),
        })
    }

    pub fn all_presets() -> Vec<ModelConfig> {
        (1..=6).map(|n| ModelConfig::preset(n).unwrap()).collect()
    }

    /// Find a preset by its name (`model1` .. `model6`).
    pub fn preset_by_name(name: &str) -> Option<ModelConfig> {
        (1..=6)
            .map(|n| ModelConfig::preset(n).unwrap())
            .find(|c| c.name == name)
    }

    pub fn kernel_label(&self) -> &'static str {
        match self.regressor {
            Regressor::Gp { family } => family.label(),
            Regressor::Gboost => "n/a",
        }
    }

    pub fn regressor_label(&self) -> &'static str {
        match self.regressor {
            Regressor::Gp { .. } => "GP",
            Regressor::Gboost => "GB",
        }
    }

    pub fn inputs_label(&self) -> String {
        let mut parts = Vec::new();
        if self.feature_spec.use_present_capacity {
            parts.push("q");
        }
        if self.feature_spec.use_delta_t {
            parts.push("dt");
        }
        if self.feature_spec.use_abs_time {
            parts.push("t");
        }
        if self.feature_spec.use_q_thru {
            parts.push("q_thru");
        }
        if !self.feature_spec.range_bins.is_empty() {
            parts.push("bins");
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone)]
enum TrainedRegressor {
    Gp(GpModel),
    Gboost(QuantileEnsemble),
}

/// A trained transition model: the regressor plus the feature scaler
/// fitted on the training set.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub config: ModelConfig,
    pub scaler: Option<Scaler>,
    feature_dim: usize,
    regressor: TrainedRegressor,
}

/// Pool transitions from all training cells into one supervised problem
/// and fit the configured regressor.
pub fn train(cells: &[CellRecord], config: &ModelConfig, seed: u64) -> Result<TransitionModel> {
    let dataset = build_dataset(cells, &config.feature_spec)?;
    let feature_dim = dataset.x.ncols();
    let regressor = match config.regressor {
        Regressor::Gp { family } => {
            let kernel = KernelConfig::new(family, feature_dim);
            let opts = FitOptions {
                seed,
                ..FitOptions::default()
            };
            TrainedRegressor::Gp(GpModel::fit(dataset.x, dataset.y, kernel, &opts)?)
        }
        Regressor::Gboost => {
            let boost = BoostConfig {
                seed,
                ..BoostConfig::default()
            };
            TrainedRegressor::Gboost(gboost::fit_quantile(&dataset.x, &dataset.y, &boost)?)
        }
    };
    Ok(TransitionModel {
        config: config.clone(),
        scaler: dataset.scaler,
        feature_dim,
        regressor,
    })
}

impl TransitionModel {
    pub fn is_gp(&self) -> bool {
        matches!(self.regressor, TrainedRegressor::Gp(_))
    }

    pub fn gp(&self) -> Option<&GpModel> {
        match &self.regressor {
            TrainedRegressor::Gp(m) => Some(m),
            TrainedRegressor::Gboost(_) => None,
        }
    }

    pub fn to_record(&self) -> TransitionModelRecord {
        TransitionModelRecord {
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            feature_dim: self.feature_dim,
            regressor: match &self.regressor {
                TrainedRegressor::Gp(m) => RegressorRecord::Gp(m.to_record()),
                TrainedRegressor::Gboost(e) => RegressorRecord::Gboost(e.clone()),
            },
        }
    }

    pub fn from_record(record: TransitionModelRecord) -> Result<TransitionModel> {
        let regressor = match record.regressor {
            RegressorRecord::Gp(r) => TrainedRegressor::Gp(GpModel::from_record(r)?),
            RegressorRecord::Gboost(e) => TrainedRegressor::Gboost(e),
        };
        Ok(TransitionModel {
            config: record.config,
            scaler: record.scaler,
            feature_dim: record.feature_dim,
            regressor,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<TransitionModel> {
        let record: TransitionModelRecord =
            serde_json::from_str(text).map_err(|e| Error::ModelLoad(e.to_string()))?;
        TransitionModel::from_record(record)
    }
}

/// Serialized transition model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionModelRecord {
    pub config: ModelConfig,
    pub scaler: Option<Scaler>,
    pub feature_dim: usize,
    pub regressor: RegressorRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RegressorRecord {
    Gp(GpModelRecord),
    Gboost(QuantileEnsemble),
}

/// Uncertainty of the predicted capacity changes.
#[derive(Debug, Clone)]
pub enum DqUncertainty {
    /// Full joint covariance (GP).
    Full(DMatrix<f64>),
    /// Independent per-step standard deviations (gradient boosting).
    Diagonal(DVector<f64>),
}

impl DqUncertainty {
    pub fn step_sigmas(&self) -> Vec<f64> {
        match self {
            DqUncertainty::Full(cov) => {
                (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect()
            }
            DqUncertainty::Diagonal(s) => s.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryOptions {
    /// Propagate the full joint covariance into the trajectory variance;
    /// when false only the diagonal is used (for comparison).
    pub full_covariance: bool,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        TrajectoryOptions {
            full_covariance: true,
        }
    }
}

/// Forecast over one test cell: per-transition capacity-change posterior
/// and the integrated capacity trajectory with its credible band.
#[derive(Debug, Clone)]
pub struct TrajectoryForecast {
    pub cell_id: String,
    /// 1-based indices of the predicted patterns (consecutive; the first
    /// `lags - 1` transitions are dropped for lack of history).
    pub pattern_indices: Vec<usize>,
    /// End time of each predicted pattern, days.
    pub t_end_days: Vec<f64>,
    pub dq_mean: DVector<f64>,
    pub dq_uncertainty: DqUncertainty,
    pub dq_true: Vec<f64>,
    pub q_true: Vec<f64>,
    /// Measured capacity at the start of the first predicted transition.
    pub q0: f64,
    pub q_mean: Vec<f64>,
    pub q_sigma: Vec<f64>,
}

impl TrajectoryForecast {
    pub fn dq_sigma(&self) -> Vec<f64> {
        self.dq_uncertainty.step_sigmas()
    }

    pub fn len(&self) -> usize {
        self.pattern_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern_indices.is_empty()
    }
}

/// Cumulative capacity mean and standard deviation from per-step changes.
///
/// `Var(Q_k)` is the sum of the leading (k+1)×(k+1) block of the change
/// covariance — the exact consequence of joint Gaussianity — or the
/// running sum of variances in the diagonal case.
pub fn integrate_trajectory(
    q0: f64,
    dq_mean: &DVector<f64>,
    uncertainty: &DqUncertainty,
) -> (Vec<f64>, Vec<f64>) {
    let n = dq_mean.len();
    let mut q_mean = Vec::with_capacity(n);
    let mut q_sigma = Vec::with_capacity(n);
    let mut running_mean = q0;
    let mut running_var = 0.0_f64;
    for k in 0..n {
        running_mean += dq_mean[k];
        q_mean.push(running_mean);
        match uncertainty {
            DqUncertainty::Full(cov) => {
                running_var += cov[(k, k)];
                for i in 0..k {
                    running_var += 2.0 * cov[(i, k)];
                }
            }
            DqUncertainty::Diagonal(sigma) => {
                running_var += sigma[k] * sigma[k];
            }
        }
        if running_var < 0.0 {
            if running_var < -1e-12 {
                log::warn!("trajectory variance clamped to 0 at step {k} ({running_var:.3e})");
            }
            running_var = 0.0;
        }
        q_sigma.push(running_var.sqrt());
    }
    (q_mean, q_sigma)
}

/// Predict all of a test cell's transitions jointly and integrate the
/// capacity trajectory. `q0` defaults to the measured capacity at the
/// first predictable transition (later than the cell's first measurement
/// when lag history is required).
pub fn forecast_cell(
    model: &TransitionModel,
    cell: &CellRecord,
    q0: Option<f64>,
    opts: TrajectoryOptions,
) -> Result<TrajectoryForecast> {
    let spec = &model.config.feature_spec;
    let patterns = segment_load_patterns(cell)?;
    let blocks: Vec<FeatureVector> = patterns
        .iter()
        .map(|p| extract_features(p, spec))
        .collect::<Result<_>>()?;
    let rows = stack_lags(&blocks, spec.lags);
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "cell {} has {} pattern(s); lags = {} leaves nothing to predict",
            cell.cell_id,
            patterns.len(),
            spec.lags
        )));
    }
    let ncols = rows[0].values.len();
    if ncols != model.feature_dim {
        return Err(Error::Incompatibility(format!(
            "feature spec produces {ncols} columns but the model was trained on {}",
            model.feature_dim
        )));
    }
    let mut x = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i].values[j]);
    if let Some(scaler) = &model.scaler {
        x = scaler.transform(&x)?;
    }

    let (dq_mean, dq_uncertainty) = match &model.regressor {
        TrainedRegressor::Gp(gp) => {
            let pred = gp.predict(&x, true)?;
            let cov = if opts.full_covariance {
                pred.covariance
            } else {
                DMatrix::from_fn(rows.len(), rows.len(), |i, j| {
                    if i == j {
                        pred.covariance[(i, i)]
                    } else {
                        0.0
                    }
                })
            };
            (pred.mean, DqUncertainty::Full(cov))
        }
        TrainedRegressor::Gboost(ensemble) => {
            let batch = gboost::predict_interval(ensemble, &x)?;
            let mean = DVector::from_fn(batch.rows.len(), |i, _| batch.rows[i].mean);
            let sigma = DVector::from_fn(batch.rows.len(), |i, _| batch.rows[i].sigma);
            (mean, DqUncertainty::Diagonal(sigma))
        }
    };

    let predicted: Vec<&crate::data_ingest::LoadPattern> = rows
        .iter()
        .map(|r| &patterns[r.pattern_index - 1])
        .collect();
    let q0 = q0.unwrap_or(predicted[0].q_start_ah);
    let (q_mean, q_sigma) = integrate_trajectory(q0, &dq_mean, &dq_uncertainty);

    Ok(TrajectoryForecast {
        cell_id: cell.cell_id.clone(),
        pattern_indices: predicted.iter().map(|p| p.index).collect(),
        t_end_days: predicted.iter().map(|p| p.t_end_s / SECONDS_PER_DAY).collect(),
        dq_mean,
        dq_uncertainty,
        dq_true: predicted.iter().map(|p| p.delta_q_ah()).collect(),
        q_true: predicted.iter().map(|p| p.q_end_ah).collect(),
        q0,
        q_mean,
        q_sigma,
    })
}

/// Pool forecasts over test cells into one evaluation report.
pub fn evaluate_forecasts(forecasts: &[TrajectoryForecast]) -> Result<EvaluationReport> {
    let mut dq_pred = Vec::new();
    let mut dq_sigma = Vec::new();
    let mut dq_true = Vec::new();
    let mut q_pred = Vec::new();
    let mut q_sigma = Vec::new();
    let mut q_true = Vec::new();
    for f in forecasts {
        dq_pred.extend(f.dq_mean.iter().copied());
        dq_sigma.extend(f.dq_sigma());
        dq_true.extend(f.dq_true.iter().copied());
        q_pred.extend(f.q_mean.iter().copied());
        q_sigma.extend(f.q_sigma.iter().copied());
        q_true.extend(f.q_true.iter().copied());
    }
    Ok(EvaluationReport {
        rmse_dq: metrics::rmse_dq(&dq_pred, &dq_true)?,
        rmse_q: metrics::rmse_q(&q_pred, &q_true)?,
        rmse_q_norm: metrics::rmse_q_norm(&q_pred, &q_true)?,
        cs2_dq: metrics::calibration_2sigma(&dq_pred, &dq_sigma, &dq_true)?,
        cs2_q: metrics::calibration_2sigma(&q_pred, &q_sigma, &q_true)?,
        n_points: dq_true.len(),
    })
}

/// Write one forecast as CSV (`t_days,q_true_ah,q_pred_ah,q_sigma_ah,
/// dq_true_ah,dq_pred_ah,dq_sigma_ah`), one row per predicted transition.
pub fn write_forecast_csv(forecast: &TrajectoryForecast, path: &Path) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(
        file,
        "t_days,q_true_ah,q_pred_ah,q_sigma_ah,dq_true_ah,dq_pred_ah,dq_sigma_ah"
    )
    .map_err(|e| Error::io(path.display().to_string(), e))?;
    let dq_sigma = forecast.dq_sigma();
    for (k, sigma) in dq_sigma.iter().enumerate() {
        writeln!(
            file,
            "{},{},{},{},{},{},{}",
            forecast.t_end_days[k],
            forecast.q_true[k],
            forecast.q_mean[k],
            forecast.q_sigma[k],
            forecast.dq_true[k],
            forecast.dq_mean[k],
            sigma
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Columns of a forecast CSV read back for evaluation or plotting.
#[derive(Debug, Clone, Default)]
pub struct ForecastTable {
    pub t_days: Vec<f64>,
    pub q_true: Vec<f64>,
    pub q_pred: Vec<f64>,
    pub q_sigma: Vec<f64>,
    pub dq_true: Vec<f64>,
    pub dq_pred: Vec<f64>,
    pub dq_sigma: Vec<f64>,
}

pub fn read_forecast_csv(path: &Path) -> Result<ForecastTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let expected = [
        "t_days",
        "q_true_ah",
        "q_pred_ah",
        "q_sigma_ah",
        "dq_true_ah",
        "dq_pred_ah",
        "dq_sigma_ah",
    ];
    let headers = reader.headers().map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Configuration(format!(
            "{}: unexpected forecast header {headers:?}",
            path.display()
        )));
    }
    let mut table = ForecastTable::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let get = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| Error::Configuration(format!("{}: non-numeric cell", path.display())))
        };
        table.t_days.push(get(0)?);
        table.q_true.push(get(1)?);
        table.q_pred.push(get(2)?);
        table.q_sigma.push(get(3)?);
        table.dq_true.push(get(4)?);
        table.dq_pred.push(get(5)?);
        table.dq_sigma.push(get(6)?);
    }
    Ok(table)
}
