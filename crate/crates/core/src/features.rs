//! Fixed-size feature extraction from variable-length load patterns.
//!
//! Each load pattern is mapped to one feature block regardless of how many
//! telemetry samples it contains. Block columns, in canonical order:
//! present capacity `q_ah`, elapsed time `delta_t_s`, absolute start time
//! `t_s`, charge throughput `q_thru_ah`, then one time-in-range column per
//! configured bin. Blocks from the preceding `lags` patterns are
//! concatenated (oldest first) to form one supervised row; the target is
//! the capacity change over the newest pattern in the row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data_ingest::{segment_load_patterns, CellRecord, LoadPattern};
use crate::error::{Error, Result};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// Telemetry channel a range bin applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameter {
    Current,
    Voltage,
    Temperature,
}

impl Parameter {
    fn short(self) -> &'static str {
        match self {
            Parameter::Current => "curr",
            Parameter::Voltage => "volt",
            Parameter::Temperature => "temp",
        }
    }
}

/// Half-open value range `[lower, upper)`; `None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub parameter: Parameter,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl RangeBin {
    pub fn new(parameter: Parameter, lower: Option<f64>, upper: Option<f64>) -> Self {
        RangeBin {
            parameter,
            lower,
            upper,
        }
    }

    fn contains(&self, v: f64) -> bool {
        self.lower.is_none_or(|lo| v >= lo) && self.upper.is_none_or(|hi| v < hi)
    }

    fn column_name(&self) -> String {
        let p = self.parameter.short();
        match (self.lower, self.upper) {
            (None, Some(hi)) => format!("t_{p}_lt{hi}_s"),
            (Some(lo), None) => format!("t_{p}_gt{lo}_s"),
            (Some(lo), Some(hi)) => format!("t_{p}_{lo}_{hi}_s"),
            (None, None) => format!("t_{p}_all_s"),
        }
    }
}

fn default_lags() -> usize {
    1
}

/// Declarative description of the feature mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    #[serde(default)]
    pub use_delta_t: bool,
    #[serde(default)]
    pub use_q_thru: bool,
    #[serde(default)]
    pub use_abs_time: bool,
    #[serde(default)]
    pub use_present_capacity: bool,
    #[serde(default)]
    pub range_bins: Vec<RangeBin>,
    /// Number of consecutive patterns whose blocks are concatenated per row.
    #[serde(default = "default_lags")]
    pub lags: usize,
    /// Z-score columns with training-set statistics.
    #[serde(default)]
    pub standardize: bool,
    /// Assign current bins on the signed value instead of the magnitude.
    #[serde(default)]
    pub signed_current_bins: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            use_delta_t: false,
            use_q_thru: false,
            use_abs_time: false,
            use_present_capacity: false,
            range_bins: Vec::new(),
            lags: 1,
            standardize: false,
            signed_current_bins: false,
        }
    }
}

/// Temperature {<5, 5–40, >40} °C and current magnitude {<2, 2–3, >3} A.
pub fn default_range_bins() -> Vec<RangeBin> {
    vec![
        RangeBin::new(Parameter::Temperature, None, Some(5.0)),
        RangeBin::new(Parameter::Temperature, Some(5.0), Some(40.0)),
        RangeBin::new(Parameter::Temperature, Some(40.0), None),
        RangeBin::new(Parameter::Current, None, Some(2.0)),
        RangeBin::new(Parameter::Current, Some(2.0), Some(3.0)),
        RangeBin::new(Parameter::Current, Some(3.0), None),
    ]
}

impl FeatureSpec {
    /// Elapsed time plus charge throughput over the preceding `lags`
    /// patterns; inputs standardized.
    pub fn usage_history(lags: usize) -> Self {
        FeatureSpec {
            use_delta_t: true,
            use_q_thru: true,
            lags,
            standardize: true,
            ..FeatureSpec::default()
        }
    }

    /// Elapsed time, charge throughput and absolute time for the current
    /// pattern only; inputs standardized.
    pub fn usage_with_elapsed_time() -> Self {
        FeatureSpec {
            use_delta_t: true,
            use_q_thru: true,
            use_abs_time: true,
            lags: 1,
            standardize: true,
            ..FeatureSpec::default()
        }
    }

    /// Number of columns in one single-pattern block.
    pub fn block_len(&self) -> usize {
        usize::from(self.use_present_capacity)
            + usize::from(self.use_delta_t)
            + usize::from(self.use_abs_time)
            + usize::from(self.use_q_thru)
            + self.range_bins.len()
    }

    /// Number of columns in one stacked row.
    pub fn row_len(&self) -> usize {
        self.block_len() * self.lags
    }

    /// Column names of one block, canonical order.
    pub fn block_column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.block_len());
        if self.use_present_capacity {
            names.push("q_ah".to_string());
        }
        if self.use_delta_t {
            names.push("delta_t_s".to_string());
        }
        if self.use_abs_time {
            names.push("t_s".to_string());
        }
        if self.use_q_thru {
            names.push("q_thru_ah".to_string());
        }
        for bin in &self.range_bins {
            names.push(bin.column_name());
        }
        names
    }

    /// Column names of one stacked row. Blocks appear oldest first;
    /// `lag0` is the pattern whose capacity change is predicted.
    pub fn row_column_names(&self) -> Vec<String> {
        let block = self.block_column_names();
        if self.lags == 1 {
            return block;
        }
        let mut names = Vec::with_capacity(self.row_len());
        for lag in (0..self.lags).rev() {
            for name in &block {
                names.push(format!("lag{lag}_{name}"));
            }
        }
        names
    }

    fn needs_series(&self) -> bool {
        self.use_q_thru || !self.range_bins.is_empty()
    }

    /// Validate structural invariants: at least one feature, `lags >= 1`,
    /// and for every parameter the bins form a contiguous partition of
    /// the real line.
    pub fn validate(&self) -> Result<()> {
        if self.lags < 1 {
            return Err(Error::Configuration("lags must be >= 1".to_string()));
        }
        if self.block_len() == 0 {
            return Err(Error::Configuration(
                "feature spec enables no features".to_string(),
            ));
        }
        for parameter in [Parameter::Current, Parameter::Voltage, Parameter::Temperature] {
            let mut bins: Vec<&RangeBin> = self
                .range_bins
                .iter()
                .filter(|b| b.parameter == parameter)
                .collect();
            if bins.is_empty() {
                continue;
            }
            bins.sort_by(|a, b| {
                let la = a.lower.unwrap_or(f64::NEG_INFINITY);
                let lb = b.lower.unwrap_or(f64::NEG_INFINITY);
                la.partial_cmp(&lb).expect("finite bin bounds")
            });
            if bins[0].lower.is_some() {
                return Err(Error::Configuration(format!(
                    "{parameter:?} bins do not cover -inf"
                )));
            }
            if bins[bins.len() - 1].upper.is_some() {
                return Err(Error::Configuration(format!(
                    "{parameter:?} bins do not cover +inf"
                )));
            }
            for pair in bins.windows(2) {
                match (pair[0].upper, pair[1].lower) {
                    (Some(hi), Some(lo)) if hi == lo => {}
                    _ => {
                        return Err(Error::Configuration(format!(
                            "{parameter:?} bins are not a contiguous partition"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// One single-pattern feature block with provenance.
#[derive(Debug, Clone)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub cell_id: String,
    /// 1-based index of the source pattern.
    pub pattern_index: usize,
}

/// Map one load pattern to its feature block.
///
/// Time-in-range columns accumulate sample intervals assigned to the bin
/// of the interval's left-endpoint value; the leading gap before the
/// first sample uses the first sample's value and the trailing gap after
/// the last sample uses the last sample's value, so per parameter the bin
/// occupancies always sum to the pattern duration. Charge throughput is
/// the trapezoidal integral of |I| over the samples, extended by
/// constant-current rectangles over those same gaps.
pub fn extract_features(pattern: &LoadPattern, spec: &FeatureSpec) -> Result<FeatureVector> {
    if spec.needs_series() && pattern.series.is_empty() {
        return Err(Error::EmptyPattern {
            cell_id: pattern.cell_id.clone(),
            index: pattern.index,
        });
    }
    let mut values = Vec::with_capacity(spec.block_len());
    if spec.use_present_capacity {
        values.push(pattern.q_start_ah);
    }
    if spec.use_delta_t {
        values.push(pattern.duration_s());
    }
    if spec.use_abs_time {
        values.push(pattern.t_start_s);
    }
    if spec.use_q_thru {
        values.push(charge_throughput(pattern));
    }
    if !spec.range_bins.is_empty() {
        let occupancy = bin_occupancies(pattern, spec);
        values.extend_from_slice(&occupancy);
    }
    Ok(FeatureVector {
        values,
        cell_id: pattern.cell_id.clone(),
        pattern_index: pattern.index,
    })
}

fn charge_throughput(pattern: &LoadPattern) -> f64 {
    let series = &pattern.series;
    let first = series.first().expect("non-empty checked by caller");
    let last = series.last().expect("non-empty checked by caller");
    let mut acc = first.current_a.abs() * (first.t_s - pattern.t_start_s).max(0.0);
    for pair in series.windows(2) {
        acc += 0.5
            * (pair[0].current_a.abs() + pair[1].current_a.abs())
            * (pair[1].t_s - pair[0].t_s);
    }
    acc += last.current_a.abs() * (pattern.t_end_s - last.t_s).max(0.0);
    acc / SECONDS_PER_HOUR
}

fn bin_value(sample: &crate::data_ingest::TelemetrySample, bin: &RangeBin, spec: &FeatureSpec) -> f64 {
    match bin.parameter {
        Parameter::Current => {
            if spec.signed_current_bins {
                sample.current_a
            } else {
                sample.current_a.abs()
            }
        }
        Parameter::Voltage => sample.voltage_v,
        Parameter::Temperature => sample.temp_c,
    }
}

fn bin_occupancies(pattern: &LoadPattern, spec: &FeatureSpec) -> Vec<f64> {
    let series = &pattern.series;
    let mut occupancy = vec![0.0_f64; spec.range_bins.len()];
    // Segment boundaries over [t_start, t_end): leading gap, inter-sample
    // intervals, trailing gap. Each segment is valued at its left-endpoint
    // sample (the first sample for the leading gap).
    let mut add = |sample: &crate::data_ingest::TelemetrySample, duration: f64| {
        if duration <= 0.0 {
            return;
        }
        for (k, bin) in spec.range_bins.iter().enumerate() {
            if bin.contains(bin_value(sample, bin, spec)) {
                occupancy[k] += duration;
            }
        }
    };
    let first = &series[0];
    add(first, first.t_s - pattern.t_start_s);
    for pair in series.windows(2) {
        add(&pair[0], pair[1].t_s - pair[0].t_s);
    }
    let last = &series[series.len() - 1];
    add(last, pattern.t_end_s - last.t_s);
    occupancy
}

/// One supervised row: `lags` concatenated blocks, oldest first.
#[derive(Debug, Clone)]
pub struct StackedRow {
    pub values: Vec<f64>,
    pub cell_id: String,
    /// 1-based index of the newest pattern in the row — the transition
    /// whose capacity change is the row's target.
    pub pattern_index: usize,
}

/// Concatenate lagged blocks into supervised rows. Transitions with fewer
/// than `lags` preceding patterns are dropped, so a cell with `P` blocks
/// yields `max(0, P - lags + 1)` rows.
pub fn stack_lags(blocks: &[FeatureVector], lags: usize) -> Vec<StackedRow> {
    assert!(lags >= 1, "lags must be >= 1");
    if blocks.len() < lags {
        return Vec::new();
    }
    let block_len = blocks[0].values.len();
    let mut rows = Vec::with_capacity(blocks.len() - lags + 1);
    for window in blocks.windows(lags) {
        let mut values = Vec::with_capacity(block_len * lags);
        for block in window {
            values.extend_from_slice(&block.values);
        }
        let newest = &window[lags - 1];
        rows.push(StackedRow {
            values,
            cell_id: newest.cell_id.clone(),
            pattern_index: newest.pattern_index,
        });
    }
    rows
}

/// Per-column standardization statistics fitted on the training set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &DMatrix<f64>) -> Scaler {
        let n = x.nrows() as f64;
        let mut mean = vec![0.0; x.ncols()];
        let mut std = vec![0.0; x.ncols()];
        for j in 0..x.ncols() {
            let col = x.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            // Constant columns pass through unscaled.
            std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Scaler { mean, std }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.ncols(),
                context: "scaler transform".to_string(),
            });
        }
        let mut out = x.clone();
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                out[(i, j)] = (out[(i, j)] - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Provenance of one dataset row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowProvenance {
    pub cell_id: String,
    pub pattern_index: usize,
}

/// The supervised dataset: stacked feature rows paired with capacity
/// changes.
#[derive(Debug, Clone)]
pub struct TransitionDataset {
    /// Row-per-transition feature matrix (standardized when configured).
    pub x: DMatrix<f64>,
    /// Capacity change over each row's newest pattern, Ah.
    pub y: DVector<f64>,
    pub provenance: Vec<RowProvenance>,
    pub column_names: Vec<String>,
    pub scaler: Option<Scaler>,
}

/// Assemble the supervised dataset from segmented cells. Lag stacking
/// never crosses a cell boundary.
pub fn build_dataset(cells: &[CellRecord], spec: &FeatureSpec) -> Result<TransitionDataset> {
    spec.validate()?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut provenance = Vec::new();
    for cell in cells {
        let patterns = segment_load_patterns(cell)?;
        let blocks: Vec<FeatureVector> = patterns
            .iter()
            .map(|p| extract_features(p, spec))
            .collect::<Result<_>>()?;
        for row in stack_lags(&blocks, spec.lags) {
            let pattern = &patterns[row.pattern_index - 1];
            y.push(pattern.delta_q_ah());
            provenance.push(RowProvenance {
                cell_id: row.cell_id.clone(),
                pattern_index: row.pattern_index,
            });
            rows.push(row.values);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no transitions remain after lag stacking (lags = {})",
            spec.lags
        )));
    }
    let ncols = spec.row_len();
    let x_raw = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    let (x, scaler) = if spec.standardize {
        let scaler = Scaler::fit(&x_raw);
        (scaler.transform(&x_raw)?, Some(scaler))
    } else {
        (x_raw, None)
    };
    Ok(TransitionDataset {
        x,
        y: DVector::from_vec(y),
        provenance,
        column_names: spec.row_column_names(),
        scaler,
    })
}

/// Write the dataset as CSV: feature columns in canonical order, last
/// column the capacity change.
pub fn write_dataset_csv(dataset: &TransitionDataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = dataset.column_names.join(",");
    header.push_str(",dq_ah");
    writeln!(file, "{header}").map_err(|e| Error::io(path.display().to_string(), e))?;
    for i in 0..dataset.x.nrows() {
        let mut line = String::new();
        for j in 0..dataset.x.ncols() {
            line.push_str(&format!("{},", dataset.x[(i, j)]));
        }
        line.push_str(&format!("{}", dataset.y[i]));
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Re-read a dataset CSV produced by [`write_dataset_csv`].
pub fn read_dataset_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>, DVector<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.last().map(String::as_str) != Some("dq_ah") {
        return Err(Error::Configuration(format!(
            "{}: last column must be dq_ah",
            path.display()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let row: Vec<f64> = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Configuration(format!("{}: non-numeric cell", path.display())))?;
        rows.push(row);
    }
    let ncols = headers.len() - 1;
    let x = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i][ncols]);
    Ok((headers[..ncols].to_vec(), x, y))
}
