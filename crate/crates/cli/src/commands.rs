//! Subcommand implementations.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use cellprog_core::data_ingest::{
    load_cell_unchecked, numeric_cell_id, segment_load_patterns, split_train_test, CellRecord,
    Manifest,
};
use cellprog_core::features::{build_dataset, write_dataset_csv, FeatureSpec};
use cellprog_core::metrics::{self, EvaluationReport, TableRow};
use cellprog_core::synthetic::{self, SyntheticConfig};
use cellprog_core::transition::{
    evaluate_forecasts, forecast_cell, read_forecast_csv, train, write_forecast_csv, ForecastTable,
    ModelConfig, TrajectoryForecast, TrajectoryOptions, TransitionModel,
};

use crate::config::{ExperimentConfig, SplitRule};
use crate::AppError;

const SECONDS_PER_DAY: f64 = 86_400.0;

fn load_cells(manifest_path: &Path) -> Result<Vec<CellRecord>, AppError> {
    cellprog_core::data_ingest::load_dataset(manifest_path).map_err(AppError::from)
}

fn split_cells(
    cells: Vec<CellRecord>,
    rule: &SplitRule,
) -> Result<(Vec<CellRecord>, Vec<CellRecord>), AppError> {
    match rule {
        SplitRule::EvenOdd => {
            let split = split_train_test(cells)?;
            Ok((split.train, split.test))
        }
        SplitRule::Explicit { train, test } => {
            let mut train_cells = Vec::new();
            let mut test_cells = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for cell in cells {
                seen.insert(cell.cell_id.clone());
                if train.contains(&cell.cell_id) {
                    train_cells.push(cell);
                } else if test.contains(&cell.cell_id) {
                    test_cells.push(cell);
                }
            }
            for name in train.iter().chain(test) {
                if !seen.contains(name) {
                    return Err(AppError::config(format!(
                        "split names cell '{name}' which is not in the manifest"
                    )));
                }
            }
            Ok((train_cells, test_cells))
        }
    }
}

/// Keep cells matching `subset`: "train" (even ids), "test" (odd ids) or
/// "all".
fn filter_subset(cells: Vec<CellRecord>, subset: &str) -> Result<Vec<CellRecord>, AppError> {
    match subset {
        "all" => Ok(cells),
        "train" | "test" => {
            let want_even = subset == "train";
            let mut out = Vec::new();
            for cell in cells {
                let id = numeric_cell_id(&cell.cell_id)?;
                if (id % 2 == 0) == want_even {
                    out.push(cell);
                }
            }
            Ok(out)
        }
        other => Err(AppError::config(format!(
            "unknown subset '{other}' (expected train, test or all)"
        ))),
    }
}

fn create_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path)
        .map_err(|e| AppError::runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    std::fs::write(path, text)
        .map_err(|e| AppError::runtime(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------

pub fn cmd_validate(manifest_path: &Path) -> Result<(), AppError> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut failures = 0usize;
    for entry in &manifest.cells {
        let loaded = load_cell_unchecked(entry, base)?;
        for warning in &loaded.warnings {
            println!("cell {}: warning: {warning}", entry.cell_id);
        }
        let issues = loaded.record.check_invariants();
        if issues.is_empty() {
            println!("cell {}: PASS", entry.cell_id);
        } else {
            failures += 1;
            for issue in &issues {
                println!("cell {}: FAIL: {issue}", entry.cell_id);
            }
        }
    }
    if failures > 0 {
        Err(AppError::validation(format!(
            "{failures} of {} cell(s) failed validation",
            manifest.cells.len()
        )))
    } else {
        println!("all {} cell(s) pass", manifest.cells.len());
        Ok(())
    }
}

// ---------------------------------------------------------------------
// featurize
// ---------------------------------------------------------------------

fn resolve_feature_spec(
    preset: &Option<String>,
    spec_path: &Option<PathBuf>,
) -> Result<FeatureSpec, AppError> {
    match (preset, spec_path) {
        (Some(_), Some(_)) => Err(AppError::config(
            "give either --preset or --spec, not both".to_string(),
        )),
        (Some(name), None) => Ok(ModelConfig::preset_by_name(name)
            .ok_or_else(|| AppError::config(format!("unknown preset '{name}'")))?
            .feature_spec),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                AppError::config(format!("cannot read spec {}: {e}", path.display()))
            })?;
            let spec: FeatureSpec = serde_json::from_str(&text)
                .map_err(|e| AppError::config(format!("invalid spec {}: {e}", path.display())))?;
            spec.validate()?;
            Ok(spec)
        }
        (None, None) => Ok(ModelConfig::preset(1).unwrap().feature_spec),
    }
}

pub fn cmd_featurize(
    manifest_path: &Path,
    preset: &Option<String>,
    spec_path: &Option<PathBuf>,
    subset: &str,
    out: &Path,
) -> Result<(), AppError> {
    let spec = resolve_feature_spec(preset, spec_path)?;
    let cells = filter_subset(load_cells(manifest_path)?, subset)?;
    if cells.is_empty() {
        return Err(AppError::config(format!("subset '{subset}' selects no cells")));
    }
    let dataset = build_dataset(&cells, &spec)?;
    write_dataset_csv(&dataset, out)?;
    println!(
        "wrote {} rows x {} feature columns to {}",
        dataset.x.nrows(),
        dataset.x.ncols(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

fn resolve_model_config(
    preset: &Option<String>,
    model_spec_path: &Option<PathBuf>,
) -> Result<ModelConfig, AppError> {
    match (preset, model_spec_path) {
        (Some(_), Some(_)) => Err(AppError::config(
            "give either --preset or --model-spec, not both".to_string(),
        )),
        (Some(name), None) => ModelConfig::preset_by_name(name)
            .ok_or_else(|| AppError::config(format!("unknown preset '{name}'"))),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                AppError::config(format!("cannot read model spec {}: {e}", path.display()))
            })?;
            let config: ModelConfig = serde_json::from_str(&text).map_err(|e| {
                AppError::config(format!("invalid model spec {}: {e}", path.display()))
            })?;
            config.feature_spec.validate()?;
            Ok(config)
        }
        (None, None) => Ok(ModelConfig::preset(1).unwrap()),
    }
}

pub fn cmd_train(
    manifest_path: &Path,
    preset: &Option<String>,
    model_spec_path: &Option<PathBuf>,
    subset: &str,
    seed: u64,
    out: &Path,
) -> Result<(), AppError> {
    let config = resolve_model_config(preset, model_spec_path)?;
    let cells = filter_subset(load_cells(manifest_path)?, subset)?;
    if cells.is_empty() {
        return Err(AppError::config(format!("subset '{subset}' selects no cells")));
    }
    let model = train(&cells, &config, seed)?;
    write_text(out, &model.to_json())?;
    println!(
        "trained {} ({}, kernel {}, lags {}) on {} cell(s); wrote {}",
        config.name,
        config.regressor_label(),
        config.kernel_label(),
        config.feature_spec.lags,
        cells.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------

pub fn cmd_forecast(
    model_path: &Path,
    manifest_path: &Path,
    subset: &str,
    cells_filter: &Option<String>,
    out_dir: &Path,
) -> Result<(), AppError> {
    let text = std::fs::read_to_string(model_path)
        .map_err(|e| AppError::runtime(format!("cannot read {}: {e}", model_path.display())))?;
    let model = TransitionModel::from_json(&text)?;
    let mut cells = filter_subset(load_cells(manifest_path)?, subset)?;
    if let Some(filter) = cells_filter {
        let wanted: Vec<&str> = filter.split(',').map(str::trim).collect();
        cells.retain(|c| wanted.contains(&c.cell_id.as_str()));
    }
    if cells.is_empty() {
        return Err(AppError::config("no cells selected to forecast".to_string()));
    }
    create_dir(out_dir)?;
    let forecasts: Vec<(String, TrajectoryForecast)> = cells
        .par_iter()
        .map(|cell| {
            forecast_cell(&model, cell, None, TrajectoryOptions::default())
                .map(|f| (cell.cell_id.clone(), f))
        })
        .collect::<Result<_, _>>()?;
    for (cell_id, forecast) in &forecasts {
        let path = out_dir.join(format!("cell_{cell_id}.csv"));
        write_forecast_csv(forecast, &path)?;
        println!(
            "cell {cell_id}: {} transitions from q0 = {:.4} Ah -> {}",
            forecast.len(),
            forecast.q0,
            path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

fn forecast_files(dir: &Path) -> Result<Vec<PathBuf>, AppError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AppError::runtime(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn report_from_tables(tables: &[ForecastTable]) -> Result<EvaluationReport, AppError> {
    let mut dq_pred = Vec::new();
    let mut dq_sigma = Vec::new();
    let mut dq_true = Vec::new();
    let mut q_pred = Vec::new();
    let mut q_sigma = Vec::new();
    let mut q_true = Vec::new();
    for t in tables {
        dq_pred.extend_from_slice(&t.dq_pred);
        dq_sigma.extend_from_slice(&t.dq_sigma);
        dq_true.extend_from_slice(&t.dq_true);
        q_pred.extend_from_slice(&t.q_pred);
        q_sigma.extend_from_slice(&t.q_sigma);
        q_true.extend_from_slice(&t.q_true);
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

pub fn cmd_evaluate(forecast_dir: &Path, out: &Option<PathBuf>) -> Result<(), AppError> {
    let files = forecast_files(forecast_dir)?;
    if files.is_empty() {
        return Err(AppError::runtime(format!(
            "no forecast CSVs in {}",
            forecast_dir.display()
        )));
    }
    let tables: Vec<ForecastTable> = files
        .iter()
        .map(|p| read_forecast_csv(p))
        .collect::<Result<_, _>>()?;
    let report = report_from_tables(&tables)?;
    println!("{}", report.to_json());
    if let Some(path) = out {
        write_text(path, &report.to_json())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// run
// ---------------------------------------------------------------------

struct ModelRun {
    config: ModelConfig,
    model_json: String,
    forecasts: Vec<(String, TrajectoryForecast)>,
    report: EvaluationReport,
}

pub struct RunArgs {
    pub config_path: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub synthetic: bool,
    pub synthetic_cells: usize,
    pub synthetic_patterns: usize,
}

pub fn cmd_run(args: &RunArgs) -> Result<(), AppError> {
    let mut config = match &args.config_path {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &args.manifest {
        config.manifest = Some(m.clone());
    }
    if let Some(o) = &args.out_dir {
        config.output_dir = Some(o.clone());
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate_split()?;
    let models = config.resolved_models()?;
    let out_dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("results"));
    create_dir(&out_dir)?;

    let manifest_path = if args.synthetic {
        let data_dir = out_dir.join("synthetic_data");
        let cells = synthetic::generate(&SyntheticConfig {
            n_cells: args.synthetic_cells,
            patterns_per_cell: args.synthetic_patterns,
            seed: config.seed,
            ..SyntheticConfig::default()
        });
        let path = synthetic::write_dataset(&cells, &data_dir)?;
        println!("generated synthetic dataset at {}", path.display());
        path
    } else {
        config
            .manifest
            .clone()
            .ok_or_else(|| AppError::config("no manifest: pass --manifest, set it in the config, or use --synthetic".to_string()))?
    };
    config.manifest = Some(manifest_path.clone());

    let cells = load_cells(&manifest_path)?;
    let (train_cells, test_cells) = split_cells(cells, &config.split)?;
    if train_cells.is_empty() {
        return Err(AppError::config("training set is empty".to_string()));
    }
    if test_cells.is_empty() {
        return Err(AppError::config("test set is empty".to_string()));
    }
    println!(
        "training on {} cell(s), testing on {} cell(s), seed {}",
        train_cells.len(),
        test_cells.len(),
        config.seed
    );

    let runs: Vec<ModelRun> = models
        .par_iter()
        .map(|model_config| -> Result<ModelRun, AppError> {
            let model = train(&train_cells, model_config, config.seed)?;
            let forecasts: Vec<(String, TrajectoryForecast)> = test_cells
                .par_iter()
                .map(|cell| {
                    forecast_cell(&model, cell, None, TrajectoryOptions::default())
                        .map(|f| (cell.cell_id.clone(), f))
                })
                .collect::<Result<_, _>>()?;
            let report =
                evaluate_forecasts(&forecasts.iter().map(|(_, f)| f.clone()).collect::<Vec<_>>())?;
            Ok(ModelRun {
                config: model_config.clone(),
                model_json: model.to_json(),
                forecasts,
                report,
            })
        })
        .collect::<Result<_, _>>()?;

    // All writes happen here, sequentially and in model order.
    create_dir(&out_dir.join("models"))?;
    create_dir(&out_dir.join("reports"))?;
    let mut table_rows = Vec::with_capacity(runs.len());
    for run in &runs {
        let name = &run.config.name;
        write_text(&out_dir.join("models").join(format!("{name}.json")), &run.model_json)?;
        let forecast_dir = out_dir.join("forecasts").join(name);
        create_dir(&forecast_dir)?;
        for (cell_id, forecast) in &run.forecasts {
            write_forecast_csv(forecast, &forecast_dir.join(format!("cell_{cell_id}.csv")))?;
        }
        write_text(
            &out_dir.join("reports").join(format!("{name}.json")),
            &run.report.to_json(),
        )?;
        table_rows.push(TableRow {
            label: format!("{} {}", run.config.name, run.config.regressor_label()),
            kernel: run.config.kernel_label().to_string(),
            lags: run.config.feature_spec.lags,
            inputs: run.config.inputs_label(),
            report: run.report.clone(),
        });
    }
    let table = metrics::render_table(&table_rows);
    write_text(&out_dir.join("table.txt"), &table)?;
    write_text(
        &out_dir.join("run_config.json"),
        &serde_json::to_string_pretty(&config).expect("config serializes"),
    )?;
    print!("{table}");
    println!("results written to {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------
// plot-data
// ---------------------------------------------------------------------

fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize, f64)> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let mut idx = ((v - min) / width) as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let lo = min + i as f64 * width;
            (lo, lo + width, c, c as f64 / (n * width))
        })
        .collect()
}

fn write_histogram_csv(path: &Path, values: &[f64]) -> Result<(), AppError> {
    let mut text = String::from("bin_lo,bin_hi,count,density\n");
    for (lo, hi, count, density) in histogram(values, 100) {
        text.push_str(&format!("{lo},{hi},{count},{density}\n"));
    }
    write_text(path, &text)
}

fn plot_inputs(manifest_path: &Path, out_dir: &Path) -> Result<(), AppError> {
    let cells = load_cells(manifest_path)?;
    if cells.is_empty() {
        return Err(AppError::runtime("manifest lists no cells".to_string()));
    }

    // Per-pattern elapsed time and charge throughput.
    let spec = FeatureSpec {
        use_delta_t: true,
        use_q_thru: true,
        ..FeatureSpec::default()
    };
    let mut pattern_rows = String::from("cell_id,pattern_index,delta_t_days,q_thru_ah\n");
    let mut any_pattern = false;
    for cell in &cells {
        for pattern in segment_load_patterns(cell)? {
            let fv = cellprog_core::features::extract_features(&pattern, &spec)?;
            pattern_rows.push_str(&format!(
                "{},{},{},{}\n",
                cell.cell_id,
                pattern.index,
                fv.values[0] / SECONDS_PER_DAY,
                fv.values[1]
            ));
            any_pattern = true;
        }
    }
    if !any_pattern {
        return Err(AppError::runtime("no load patterns to summarize".to_string()));
    }
    write_text(&out_dir.join("inputs_patterns.csv"), &pattern_rows)?;

    // Pooled telemetry distributions.
    let mut current = Vec::new();
    let mut voltage = Vec::new();
    let mut temperature = Vec::new();
    for cell in &cells {
        for s in &cell.samples {
            current.push(s.current_a);
            voltage.push(s.voltage_v);
            temperature.push(s.temp_c);
        }
    }
    write_histogram_csv(&out_dir.join("hist_current.csv"), &current)?;
    write_histogram_csv(&out_dir.join("hist_voltage.csv"), &voltage)?;
    write_histogram_csv(&out_dir.join("hist_temperature.csv"), &temperature)?;

    // Capacity series per group.
    let mut capacity = String::from("group,cell_id,t_days,q_ah\n");
    for cell in &cells {
        for event in &cell.reference_events {
            capacity.push_str(&format!(
                "{},{},{},{}\n",
                cell.group,
                cell.cell_id,
                event.t_end_s / SECONDS_PER_DAY,
                event.capacity_ah
            ));
        }
    }
    write_text(&out_dir.join("capacity_series.csv"), &capacity)?;
    println!("input summaries written to {}", out_dir.display());
    Ok(())
}

fn plot_results(results_dir: &Path, out_dir: &Path) -> Result<(), AppError> {
    let forecasts_root = results_dir.join("forecasts");
    let mut model_dirs: Vec<PathBuf> = std::fs::read_dir(&forecasts_root)
        .map_err(|e| {
            AppError::runtime(format!("cannot read {}: {e}", forecasts_root.display()))
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    model_dirs.sort();
    if model_dirs.is_empty() {
        return Err(AppError::runtime(format!(
            "no forecasts under {}",
            forecasts_root.display()
        )));
    }
    for model_dir in &model_dirs {
        let model_name = model_dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let files = forecast_files(model_dir)?;
        if files.is_empty() {
            return Err(AppError::runtime(format!(
                "no forecast CSVs in {}",
                model_dir.display()
            )));
        }
        let mut scatter = String::from("cell_id,t_days,dq_true_ah,dq_pred_ah,half_width_2sigma_ah\n");
        let mut trajectories = String::from("cell_id,t_days,q_true_ah,q_pred_ah,q_sigma_ah\n");
        for file in &files {
            let cell_id = file
                .file_stem()
                .map(|s| s.to_string_lossy().trim_start_matches("cell_").to_string())
                .unwrap_or_default();
            let table = read_forecast_csv(file)?;
            for k in 0..table.t_days.len() {
                scatter.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cell_id,
                    table.t_days[k],
                    table.dq_true[k],
                    table.dq_pred[k],
                    2.0 * table.dq_sigma[k]
                ));
                trajectories.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cell_id, table.t_days[k], table.q_true[k], table.q_pred[k], table.q_sigma[k]
                ));
            }
        }
        write_text(&out_dir.join(format!("dq_scatter_{model_name}.csv")), &scatter)?;
        write_text(
            &out_dir.join(format!("trajectories_{model_name}.csv")),
            &trajectories,
        )?;
    }
    println!("forecast plot data written to {}", out_dir.display());
    Ok(())
}

pub fn cmd_plotdata(
    manifest: &Option<PathBuf>,
    results: &Option<PathBuf>,
    out_dir: &Path,
) -> Result<(), AppError> {
    if manifest.is_none() && results.is_none() {
        return Err(AppError::config(
            "pass --manifest (input summaries) and/or --results (forecast bundles)".to_string(),
        ));
    }
    create_dir(out_dir)?;
    if let Some(m) = manifest {
        plot_inputs(m, out_dir)?;
    }
    if let Some(r) = results {
        plot_results(r, out_dir)?;
    }
    Ok(())
}
