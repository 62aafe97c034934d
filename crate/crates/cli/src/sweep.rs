//! Grid sweeps and the mask/aggregation ablation.

use std::fs;
use std::path::Path;

use fedmask::aggregation::AggregationMethod;
use serde::Serialize;
use toml::{Table, Value};

use crate::config::{canonical_key, parse_value, set_key, table_to_config};
use crate::error::{CliError, CliResult};
use crate::output::{run_into, write_csv};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamAxis {
    /// Name as given on the command line, used for columns and directories.
    pub name: String,
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_axis(spec: &str) -> CliResult<ParamAxis> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--param expects NAME=V1,V2,..., got `{spec}`")))?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if name.trim().is_empty() || values.is_empty() {
        return Err(CliError::Config(format!("--param `{spec}` has no name or no values")));
    }
    Ok(ParamAxis {
        name: name.trim().to_string(),
        key: canonical_key(name),
        values,
    })
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid(axes: &[ParamAxis]) -> Vec<Vec<&str>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push(v.as_str());
                    cell
                })
            })
            .collect()
    })
}

fn seed_value(seed: u64) -> CliResult<Value> {
    i64::try_from(seed)
        .map(Value::Integer)
        .map_err(|_| CliError::Config(format!("seed {seed} exceeds the supported range")))
}

fn status_of(r: &CliResult<()>) -> String {
    match r {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    seed: u64,
    final_macro_f1: Option<f64>,
    best_macro_f1: Option<f64>,
    correction_accuracy: Option<f64>,
    status: String,
}

/// Run every cell for `seeds` consecutive seeds starting at `first_seed`.
/// Failed cells are recorded and the sweep moves on; the return value counts
/// them.
pub fn run_sweep(
    base: &Table,
    axes: &[ParamAxis],
    first_seed: u64,
    seeds: usize,
    out: &Path,
    workers: usize,
) -> CliResult<usize> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.extend(
        ["seed", "final_macro_f1", "best_macro_f1", "correction_accuracy", "status"]
            .map(String::from),
    );
    w.write_record(&header).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut failures = 0;
    for cell in grid(axes) {
        let cell_dir: String = axes
            .iter()
            .zip(&cell)
            .map(|(a, v)| format!("{}={}", a.name, v))
            .collect::<Vec<_>>()
            .join("_");
        for seed in (0..seeds as u64).map(|i| first_seed + i) {
            let dir = out.join(&cell_dir).join(format!("seed={seed}"));
            let mut row = SweepRow {
                seed,
                final_macro_f1: None,
                best_macro_f1: None,
                correction_accuracy: None,
                status: String::new(),
            };
            let result = (|| {
                let mut table = base.clone();
                for (a, v) in axes.iter().zip(&cell) {
                    set_key(&mut table, &a.key, parse_value(v))?;
                }
                set_key(&mut table, "seed", seed_value(seed)?)?;
                let cfg = table_to_config(table)?;
                let report = run_into(&dir, &cfg, workers)?;
                row.final_macro_f1 = Some(report.final_metrics.macro_f1);
                row.best_macro_f1 = Some(report.best_metrics.macro_f1);
                row.correction_accuracy = report.correction_accuracy.map(|c| c.estimated);
                Ok(())
            })();
            if let Err(e) = &result {
                log::error!("sweep cell {cell_dir} seed {seed}: {e}");
                failures += 1;
            }
            row.status = status_of(&result);
            let mut record: Vec<String> = cell.iter().map(|v| v.to_string()).collect();
            record.push(row.seed.to_string());
            for v in [row.final_macro_f1, row.best_macro_f1, row.correction_accuracy] {
                record.push(v.map(|x| x.to_string()).unwrap_or_default());
            }
            record.push(row.status);
            w.write_record(&record).map_err(|e| CliError::Runtime(e.to_string()))?;
            w.flush()?;
        }
    }
    Ok(failures)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mask: &'static str,
    pub aggregation: String,
    pub seed: u64,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub status: String,
}

/// Mask on/off crossed with every aggregation rule, per seed.
pub fn run_ablation(
    base: &Table,
    first_seed: u64,
    seeds: usize,
    out: &Path,
    workers: usize,
) -> CliResult<(Vec<AblationRow>, usize)> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut failures = 0;
    for seed in (0..seeds as u64).map(|i| first_seed + i) {
        for (mask, mask_name) in [(true, "on"), (false, "off")] {
            for method in AggregationMethod::ALL {
                let dir = out.join(format!("mask={mask_name}_aggregation={method}/seed={seed}"));
                let mut row = AblationRow {
                    mask: mask_name,
                    aggregation: method.to_string(),
                    seed,
                    macro_precision: None,
                    macro_recall: None,
                    macro_f1: None,
                    accuracy: None,
                    status: String::new(),
                };
                let result = (|| {
                    let mut table = base.clone();
                    set_key(&mut table, "correction.mask", Value::Boolean(mask))?;
                    set_key(&mut table, "aggregation.method", Value::String(method.to_string()))?;
                    set_key(&mut table, "seed", seed_value(seed)?)?;
                    let cfg = table_to_config(table)?;
                    let m = run_into(&dir, &cfg, workers)?.final_metrics;
                    row.macro_precision = Some(m.macro_precision);
                    row.macro_recall = Some(m.macro_recall);
                    row.macro_f1 = Some(m.macro_f1);
                    row.accuracy = Some(m.accuracy);
                    Ok(())
                })();
                if let Err(e) = &result {
                    log::error!("ablation {mask_name}/{method} seed {seed}: {e}");
                    failures += 1;
                }
                row.status = status_of(&result);
                rows.push(row);
                write_csv(&out.join("ablation.csv"), &rows)?;
            }
        }
    }
    Ok((rows, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        let a = parse_axis("alpha=0.1, 0.5,1").unwrap();
        assert_eq!(a.key, "correction.alpha");
        assert_eq!(a.values, ["0.1", "0.5", "1"]);
        let b = parse_axis("train.lr=0.01").unwrap();
        assert_eq!(b.key, "train.lr");
        assert!(parse_axis("alpha").is_err());
        assert!(parse_axis("alpha=").is_err());
    }

    #[test]
    fn grid_is_row_major_product() {
        let axes = [parse_axis("a=1,2").unwrap(), parse_axis("b=x,y,z").unwrap()];
        let g = grid(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], ["1", "x"]);
        assert_eq!(g[1], ["1", "y"]);
        assert_eq!(g[3], ["2", "x"]);
        assert_eq!(grid(&[]), vec![Vec::<&str>::new()]);
    }
}
