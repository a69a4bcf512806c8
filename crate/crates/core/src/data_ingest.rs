//! Cell telemetry ingestion: canonical CSV parsing, coulomb counting and
//! segmentation of each cell's history into load patterns.
//!
//! Canonical on-disk format (one pair of files per cell):
//!
//! * telemetry CSV, header `t_s,current_a,voltage_v,temp_c` — the full
//!   time-series for the cell, seconds since cell start, signed amperes
//!   (positive = charge), volts, degrees Celsius;
//! * reference CSV, header `t_start_s,t_end_s,capacity_ah` — one row per
//!   reference characterisation test; `capacity_ah` may be left empty, in
//!   which case it is computed by coulomb counting the telemetry inside
//!   the window;
//! * a JSON manifest listing `{cell_id, telemetry_path, reference_path,
//!   group}` entries, paths relative to the manifest file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// One telemetry sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    /// Seconds since the start of the cell's record.
    pub t_s: f64,
    /// Signed current in amperes, positive for charge.
    pub current_a: f64,
    pub voltage_v: f64,
    pub temp_c: f64,
}

/// A reference characterisation test bracketed in time, yielding one
/// capacity measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEvent {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub capacity_ah: f64,
}

/// Full history of a single cell: telemetry plus reference events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub group: String,
    pub samples: Vec<TelemetrySample>,
    pub reference_events: Vec<ReferenceEvent>,
}

/// The usage time-series between two consecutive capacity measurements,
/// together with the bracketing capacities.
#[derive(Debug, Clone)]
pub struct LoadPattern {
    pub cell_id: String,
    /// 1-based pattern index within the cell.
    pub index: usize,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub series: Vec<TelemetrySample>,
    /// Capacity measured just before the pattern (Ah).
    pub q_start_ah: f64,
    /// Capacity measured just after the pattern (Ah).
    pub q_end_ah: f64,
}

impl LoadPattern {
    /// Capacity change over the pattern, may be positive or negative.
    pub fn delta_q_ah(&self) -> f64 {
        self.q_end_ah - self.q_start_ah
    }

    pub fn duration_s(&self) -> f64 {
        self.t_end_s - self.t_start_s
    }
}

/// Options for [`segment_load_patterns_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    /// When true, each pattern's window is extended to the end of the
    /// trailing reference test so the reference current counts toward the
    /// pattern's charge throughput. Off by default: characterisation is
    /// treated separately from usage.
    pub include_reference_samples: bool,
}

/// Integrate `|current|` over a reference segment by the trapezoidal rule
/// and convert to ampere-hours.
///
/// The trapezoidal rule is second order and handles the irregular sample
/// spacing found in practice.
pub fn coulomb_count(series: &[TelemetrySample]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::MalformedReference(format!(
            "{} sample(s); at least 2 required to integrate",
            series.len()
        )));
    }
    let mut acc = 0.0_f64;
    for pair in series.windows(2) {
        let dt = pair[1].t_s - pair[0].t_s;
        if dt <= 0.0 {
            return Err(Error::NonMonotonicTime(format!(
                "t={} followed by t={}",
                pair[0].t_s, pair[1].t_s
            )));
        }
        acc += 0.5 * (pair[0].current_a.abs() + pair[1].current_a.abs()) * dt;
    }
    Ok(acc / SECONDS_PER_HOUR)
}

/// Segment a cell's history into load patterns with default options.
///
/// Pattern `i` spans from the end of reference event `i` to the start of
/// reference event `i+1`; its bracketing capacities come from those two
/// events. A record with `n` reference events yields exactly `n - 1`
/// patterns.
pub fn segment_load_patterns(record: &CellRecord) -> Result<Vec<LoadPattern>> {
    segment_load_patterns_with(record, SegmentOptions::default())
}

pub fn segment_load_patterns_with(
    record: &CellRecord,
    opts: SegmentOptions,
) -> Result<Vec<LoadPattern>> {
    let events = &record.reference_events;
    if events.len() < 2 {
        return Err(Error::InsufficientReferences {
            cell_id: record.cell_id.clone(),
            count: events.len(),
        });
    }
    let mut patterns = Vec::with_capacity(events.len() - 1);
    for (i, pair) in events.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        let t_start = prev.t_end_s;
        let t_end = if opts.include_reference_samples {
            next.t_end_s
        } else {
            next.t_start_s
        };
        let series: Vec<TelemetrySample> = record
            .samples
            .iter()
            .filter(|s| s.t_s >= t_start && s.t_s < t_end)
            .copied()
            .collect();
        patterns.push(LoadPattern {
            cell_id: record.cell_id.clone(),
            index: i + 1,
            t_start_s: t_start,
            t_end_s: t_end,
            series,
            q_start_ah: prev.capacity_ah,
            q_end_ah: next.capacity_ah,
        });
    }
    Ok(patterns)
}

/// Parse the numeric identifier carried by a cell id: the trailing run of
/// digits (`"7"` → 7, `"RW12"` → 12).
pub fn numeric_cell_id(cell_id: &str) -> Result<u64> {
    let digits: String = cell_id
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits
        .parse::<u64>()
        .map_err(|_| Error::IdParse(cell_id.to_string()))
}

/// Deterministic even/odd train-test split on the numeric cell id.
#[derive(Debug)]
pub struct TrainTestSplit {
    pub train: Vec<CellRecord>,
    pub test: Vec<CellRecord>,
    pub warnings: Vec<String>,
}

/// Even-numbered cells go to the training set, odd-numbered cells to the
/// test set.
pub fn split_train_test(records: Vec<CellRecord>) -> Result<TrainTestSplit> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for record in records {
        let id = numeric_cell_id(&record.cell_id)?;
        if id % 2 == 0 {
            train.push(record);
        } else {
            test.push(record);
        }
    }
    let mut warnings = Vec::new();
    if train.is_empty() {
        warnings.push("train set is empty (no even-numbered cells)".to_string());
    }
    if test.is_empty() {
        warnings.push("test set is empty (no odd-numbered cells)".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(TrainTestSplit {
        train,
        test,
        warnings,
    })
}

impl CellRecord {
    /// Check every record invariant and return the list of violations.
    /// An empty list means the cell is usable.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut issues = Vec::new();
        for (i, pair) in self.samples.windows(2).enumerate() {
            if pair[1].t_s <= pair[0].t_s {
                issues.push(format!(
                    "sample times not strictly increasing at row {} (t={} then t={})",
                    i, pair[0].t_s, pair[1].t_s
                ));
                break;
            }
        }
        for (i, ev) in self.reference_events.iter().enumerate() {
            if ev.t_end_s <= ev.t_start_s {
                issues.push(format!(
                    "reference event {i} has non-positive duration ({}..{})",
                    ev.t_start_s, ev.t_end_s
                ));
            }
            if !ev.capacity_ah.is_finite() || ev.capacity_ah <= 0.0 {
                issues.push(format!(
                    "reference event {i} capacity {} is not finite and positive",
                    ev.capacity_ah
                ));
            }
        }
        for (i, pair) in self.reference_events.windows(2).enumerate() {
            if pair[1].t_start_s <= pair[0].t_end_s {
                issues.push(format!(
                    "load pattern {} would have non-positive duration (reference events overlap or touch at t={})",
                    i + 1,
                    pair[0].t_end_s
                ));
            }
        }
        issues
    }

    /// Fail with [`Error::InvalidCell`] if any invariant is violated.
    pub fn validate(&self) -> Result<()> {
        let issues = self.check_invariants();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCell {
                cell_id: self.cell_id.clone(),
                issues,
            })
        }
    }
}

/// One manifest entry pointing at a cell's data files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cell_id: String,
    pub telemetry_path: String,
    pub reference_path: String,
    #[serde(default)]
    pub group: String,
}

/// Dataset manifest: the list of cells making up a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub cells: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::MalformedReference(format!(
            "{}:{}: cannot parse '{}' as a number",
            path.display(),
            line,
            field
        ))
    })
}

/// Read a telemetry CSV (`t_s,current_a,voltage_v,temp_c`).
pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetrySample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut samples = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        if row.len() != 4 {
            return Err(Error::MalformedReference(format!(
                "{}:{}: expected 4 columns, got {}",
                path.display(),
                i + 2,
                row.len()
            )));
        }
        samples.push(TelemetrySample {
            t_s: parse_f64(&row[0], path, i + 2)?,
            current_a: parse_f64(&row[1], path, i + 2)?,
            voltage_v: parse_f64(&row[2], path, i + 2)?,
            temp_c: parse_f64(&row[3], path, i + 2)?,
        });
    }
    Ok(samples)
}

/// Outcome of loading one cell, including non-fatal warnings (e.g. the
/// capacity fallback path).
#[derive(Debug)]
pub struct LoadedCell {
    pub record: CellRecord,
    pub warnings: Vec<String>,
}

/// Read a reference CSV (`t_start_s,t_end_s,capacity_ah`). Rows with an
/// empty capacity field are computed by coulomb counting `telemetry`
/// within the window; each such fallback is reported as a warning.
pub fn read_reference(
    path: &Path,
    telemetry: &[TelemetrySample],
) -> Result<(Vec<ReferenceEvent>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        if row.len() != 3 {
            return Err(Error::MalformedReference(format!(
                "{}:{}: expected 3 columns, got {}",
                path.display(),
                i + 2,
                row.len()
            )));
        }
        let t_start_s = parse_f64(&row[0], path, i + 2)?;
        let t_end_s = parse_f64(&row[1], path, i + 2)?;
        let capacity_ah = if row[2].trim().is_empty() {
            let window: Vec<TelemetrySample> = telemetry
                .iter()
                .filter(|s| s.t_s >= t_start_s && s.t_s <= t_end_s)
                .copied()
                .collect();
            let q = coulomb_count(&window)?;
            warnings.push(format!(
                "{}:{}: capacity missing, computed {q:.6} Ah by coulomb counting",
                path.display(),
                i + 2
            ));
            q
        } else {
            parse_f64(&row[2], path, i + 2)?
        };
        events.push(ReferenceEvent {
            t_start_s,
            t_end_s,
            capacity_ah,
        });
    }
    Ok((events, warnings))
}

/// Load one cell's files without validating invariants.
pub fn load_cell_unchecked(entry: &ManifestEntry, base_dir: &Path) -> Result<LoadedCell> {
    let telemetry = read_telemetry(&resolve(base_dir, &entry.telemetry_path))?;
    let (reference_events, warnings) =
        read_reference(&resolve(base_dir, &entry.reference_path), &telemetry)?;
    Ok(LoadedCell {
        record: CellRecord {
            cell_id: entry.cell_id.clone(),
            group: entry.group.clone(),
            samples: telemetry,
            reference_events,
        },
        warnings,
    })
}

/// Load one cell and reject it whole if any invariant is violated.
pub fn load_cell(entry: &ManifestEntry, base_dir: &Path) -> Result<LoadedCell> {
    let loaded = load_cell_unchecked(entry, base_dir)?;
    loaded.record.validate()?;
    Ok(loaded)
}

/// Load every cell in a manifest. Cells are independent; any invalid cell
/// fails the whole load (callers wanting per-cell reports should use
/// [`load_cell_unchecked`] and [`CellRecord::check_invariants`]).
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<CellRecord>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(manifest.cells.len());
    for entry in &manifest.cells {
        let loaded = load_cell(entry, base)?;
        for w in &loaded.warnings {
            log::warn!("cell {}: {w}", entry.cell_id);
        }
        records.push(loaded.record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t_s: f64, current_a: f64) -> TelemetrySample {
        TelemetrySample {
            t_s,
            current_a,
            voltage_v: 3.7,
            temp_c: 25.0,
        }
    }

    fn cell_with_events(events: &[(f64, f64, f64)]) -> CellRecord {
        CellRecord {
            cell_id: "1".to_string(),
            group: "g".to_string(),
            samples: vec![sample(0.0, 1.0), sample(1.0, 1.0)],
            reference_events: events
                .iter()
                .map(|&(t_start_s, t_end_s, capacity_ah)| ReferenceEvent {
                    t_start_s,
                    t_end_s,
                    capacity_ah,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_current_integrates_exactly() {
        let series: Vec<_> = (0..=6).map(|i| sample(i as f64 * 600.0, 2.0)).collect();
        assert_eq!(coulomb_count(&series).unwrap(), 2.0);
    }

    #[test]
    fn linear_ramp_integrates_to_triangle_area() {
        // 0 -> 2 A over one hour: integral = 1 Ah
        let series: Vec<_> = (0..=360)
            .map(|i| sample(i as f64 * 10.0, 2.0 * i as f64 / 360.0))
            .collect();
        let q = coulomb_count(&series).unwrap();
        assert!((q - 1.0).abs() < 1e-12, "got {q}");
    }

    #[test]
    fn irregular_series_matches_fine_riemann_sum() {
        // Smooth analytic profile sampled at 10 irregular points; the
        // oracle is a midpoint Riemann sum at 1000x the resolution over
        // each sample interval, applied to the same linear interpolant.
        let profile = |t: f64| 1.5 + (t / 900.0).sin().abs() + 0.3 * (t / 400.0).cos();
        let times = [0.0, 130.0, 410.0, 700.0, 1090.0, 1510.0, 2000.0, 2450.0, 3100.0, 3600.0];
        let series: Vec<_> = times.iter().map(|&t| sample(t, profile(t))).collect();

        let mut oracle = 0.0;
        for pair in series.windows(2) {
            let (t0, t1) = (pair[0].t_s, pair[1].t_s);
            let (i0, i1) = (pair[0].current_a.abs(), pair[1].current_a.abs());
            let n = 1000;
            let h = (t1 - t0) / n as f64;
            for k in 0..n {
                let tm = t0 + (k as f64 + 0.5) * h;
                let w = (tm - t0) / (t1 - t0);
                oracle += (i0 * (1.0 - w) + i1 * w) * h;
            }
        }
        oracle /= 3600.0;

        let q = coulomb_count(&series).unwrap();
        assert!(
            (q - oracle).abs() / oracle < 1e-9,
            "trapezoid {q} vs oracle {oracle}"
        );
    }

    #[test]
    fn coulomb_count_rejects_short_and_unordered_series() {
        assert!(matches!(
            coulomb_count(&[sample(0.0, 1.0)]),
            Err(Error::MalformedReference(_))
        ));
        assert!(matches!(
            coulomb_count(&[sample(0.0, 1.0), sample(10.0, 1.0), sample(5.0, 1.0)]),
            Err(Error::NonMonotonicTime(_))
        ));
    }

    #[test]
    fn coulomb_count_ignores_current_sign() {
        let charge: Vec<_> = (0..=10).map(|i| sample(i as f64 * 360.0, 2.0)).collect();
        let discharge: Vec<_> = (0..=10).map(|i| sample(i as f64 * 360.0, -2.0)).collect();
        assert_eq!(
            coulomb_count(&charge).unwrap(),
            coulomb_count(&discharge).unwrap()
        );
    }

    #[test]
    fn coulomb_count_is_additive_over_concatenation() {
        let first: Vec<_> = (0..=5).map(|i| sample(i as f64 * 60.0, 1.0 + i as f64)).collect();
        let second: Vec<_> = (5..=9).map(|i| sample(i as f64 * 60.0, 1.0 + i as f64)).collect();
        let whole: Vec<_> = (0..=9).map(|i| sample(i as f64 * 60.0, 1.0 + i as f64)).collect();
        let sum = coulomb_count(&first).unwrap() + coulomb_count(&second).unwrap();
        let total = coulomb_count(&whole).unwrap();
        assert!((sum - total).abs() < 1e-12);
    }

    #[test]
    fn five_reference_events_yield_four_patterns() {
        let cell = cell_with_events(&[
            (0.0, 100.0, 2.0),
            (1000.0, 1100.0, 1.95),
            (2000.0, 2100.0, 1.9),
            (3000.0, 3100.0, 1.87),
            (4000.0, 4100.0, 1.84),
        ]);
        let patterns = segment_load_patterns(&cell).unwrap();
        assert_eq!(patterns.len(), 4);
        assert_eq!(patterns[0].index, 1);
        assert_eq!(patterns[0].q_start_ah, 2.0);
        assert_eq!(patterns[0].q_end_ah, 1.95);
        assert_eq!(patterns[3].q_end_ah, 1.84);
    }

    #[test]
    fn two_reference_events_yield_one_pattern() {
        let cell = cell_with_events(&[(0.0, 100.0, 2.0), (5000.0, 5100.0, 1.9)]);
        let patterns = segment_load_patterns(&cell).unwrap();
        assert_eq!(patterns.len(), 1);
        assert_eq!(patterns[0].t_start_s, 100.0);
        assert_eq!(patterns[0].t_end_s, 5000.0);
    }

    #[test]
    fn pattern_durations_follow_event_gaps() {
        // Events ending at t = 0 h, 10 h, 30 h (zero-length tests) give
        // pattern durations of 10 h and 20 h.
        let h = 3600.0;
        let cell = cell_with_events(&[
            (0.0, 1e-9, 2.0),
            (10.0 * h, 10.0 * h + 1e-9, 1.9),
            (30.0 * h, 30.0 * h + 1e-9, 1.8),
        ]);
        let patterns = segment_load_patterns(&cell).unwrap();
        assert_eq!(patterns.len(), 2);
        assert!((patterns[0].duration_s() - 10.0 * h).abs() < 1e-6);
        assert!((patterns[1].duration_s() - 20.0 * h).abs() < 1e-6);
    }

    #[test]
    fn reference_windows_can_be_folded_into_patterns() {
        let mut cell = cell_with_events(&[(0.0, 100.0, 2.0), (1000.0, 1150.0, 1.9)]);
        cell.samples = vec![
            sample(50.0, -2.0),   // inside first reference test
            sample(500.0, 1.0),   // usage
            sample(1050.0, -2.0), // inside trailing reference test
        ];
        let default = segment_load_patterns(&cell).unwrap();
        assert_eq!(default[0].t_end_s, 1000.0);
        assert_eq!(default[0].series.len(), 1);

        let folded = segment_load_patterns_with(
            &cell,
            SegmentOptions {
                include_reference_samples: true,
            },
        )
        .unwrap();
        assert_eq!(folded[0].t_end_s, 1150.0);
        assert_eq!(folded[0].series.len(), 2);
    }

    #[test]
    fn single_event_is_insufficient() {
        let cell = cell_with_events(&[(0.0, 100.0, 2.0)]);
        assert!(matches!(
            segment_load_patterns(&cell),
            Err(Error::InsufficientReferences { .. })
        ));
    }

    #[test]
    fn durations_partition_recorded_span() {
        let cell = cell_with_events(&[
            (0.0, 120.0, 2.0),
            (900.0, 1020.0, 1.97),
            (1800.0, 1950.0, 1.94),
            (2500.0, 2620.0, 1.91),
        ]);
        let patterns = segment_load_patterns(&cell).unwrap();
        let pattern_total: f64 = patterns.iter().map(|p| p.duration_s()).sum();
        let reference_total: f64 = cell
            .reference_events
            .iter()
            .map(|e| e.t_end_s - e.t_start_s)
            .sum();
        let span = cell.reference_events.last().unwrap().t_end_s
            - cell.reference_events.first().unwrap().t_start_s;
        assert!((pattern_total + reference_total - span).abs() < 1e-9);
    }

    #[test]
    fn even_odd_split_by_parity() {
        let records: Vec<CellRecord> = [1, 2, 3, 4]
            .iter()
            .map(|i| CellRecord {
                cell_id: i.to_string(),
                group: String::new(),
                samples: vec![],
                reference_events: vec![],
            })
            .collect();
        let split = split_train_test(records).unwrap();
        let train_ids: Vec<_> = split.train.iter().map(|c| c.cell_id.clone()).collect();
        let test_ids: Vec<_> = split.test.iter().map(|c| c.cell_id.clone()).collect();
        assert_eq!(train_ids, vec!["2", "4"]);
        assert_eq!(test_ids, vec!["1", "3"]);
        assert!(split.warnings.is_empty());
    }

    #[test]
    fn degenerate_split_warns() {
        let records = vec![CellRecord {
            cell_id: "2".to_string(),
            group: String::new(),
            samples: vec![],
            reference_events: vec![],
        }];
        let split = split_train_test(records).unwrap();
        assert_eq!(split.train.len(), 1);
        assert!(split.test.is_empty());
        assert_eq!(split.warnings.len(), 1);
    }

    #[test]
    fn non_numeric_id_is_rejected() {
        assert!(matches!(numeric_cell_id("abc"), Err(Error::IdParse(_))));
        assert_eq!(numeric_cell_id("RW12").unwrap(), 12);
        assert_eq!(numeric_cell_id("7").unwrap(), 7);
    }

    #[test]
    fn parity_split_balances_a_gapped_id_range() {
        // 26 cells numbered 1..28 with two ids removed: 13 even, 13 odd.
        let records: Vec<CellRecord> = (1..=28)
            .filter(|&i| i != 16 && i != 17)
            .map(|i| CellRecord {
                cell_id: format!("RW{i}"),
                group: String::new(),
                samples: vec![],
                reference_events: vec![],
            })
            .collect();
        let split = split_train_test(records).unwrap();
        assert_eq!(split.train.len(), 13);
        assert_eq!(split.test.len(), 13);
    }

    #[test]
    fn decreasing_timestamps_invalidate_whole_cell() {
        let mut cell = cell_with_events(&[(0.0, 100.0, 2.0), (1000.0, 1100.0, 1.9)]);
        cell.samples = vec![sample(0.0, 1.0), sample(10.0, 1.0), sample(5.0, 1.0)];
        let issues = cell.check_invariants();
        assert_eq!(issues.len(), 1);
        assert!(issues[0].contains("not strictly increasing"));
        assert!(matches!(cell.validate(), Err(Error::InvalidCell { .. })));
    }

    #[test]
    fn touching_reference_events_are_flagged() {
        let cell = cell_with_events(&[(0.0, 100.0, 2.0), (100.0, 200.0, 1.9)]);
        let issues = cell.check_invariants();
        assert!(issues.iter().any(|m| m.contains("non-positive duration")));
    }

    #[test]
    fn reference_capacity_fallback_roundtrip() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let tele_path = dir.path().join("tele.csv");
        let ref_path = dir.path().join("ref.csv");

        // 2 A discharge for one hour inside the window -> 2 Ah.
        let mut tele = std::fs::File::create(&tele_path).unwrap();
        writeln!(tele, "t_s,current_a,voltage_v,temp_c").unwrap();
        for i in 0..=60 {
            writeln!(tele, "{},-2.0,3.6,25.0", i * 60).unwrap();
        }
        writeln!(tele, "7200,0.5,3.7,25.0").unwrap();
        writeln!(tele, "10000,0.5,3.7,25.0").unwrap();
        drop(tele);

        let mut refs = std::fs::File::create(&ref_path).unwrap();
        writeln!(refs, "t_start_s,t_end_s,capacity_ah").unwrap();
        writeln!(refs, "0,3600,").unwrap();
        writeln!(refs, "9000,10000,1.9").unwrap();
        drop(refs);

        let entry = ManifestEntry {
            cell_id: "1".to_string(),
            telemetry_path: "tele.csv".to_string(),
            reference_path: "ref.csv".to_string(),
            group: "g".to_string(),
        };
        let loaded = load_cell_unchecked(&entry, dir.path()).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!((loaded.record.reference_events[0].capacity_ah - 2.0).abs() < 1e-12);
        assert_eq!(loaded.record.reference_events[1].capacity_ah, 1.9);
    }
}
