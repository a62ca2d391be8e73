//! Plot-ready emission of experiment outputs: one CSV per metric series and
//! a JSON summary with the climate distance tables. No rendering.

use crate::error::{Error, Result};
use crate::eval::{ClimateHistogram, MetricSeries};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One model's forecast series under one case label.
#[derive(Debug, Clone)]
pub struct ForecastEntry {
    pub model: String,
    pub case: String,
    pub series: MetricSeries,
}

/// Climate distances of one model against the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClimateDistance {
    pub model: String,
    pub case: String,
    pub ks: f64,
    pub hellinger: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["mse", "crps", "error", "spread"];

fn metric_values<'a>(series: &'a MetricSeries, metric: &str) -> &'a [f64] {
    match metric {
        "mse" => &series.mse,
        "crps" => &series.crps,
        "error" => &series.error,
        "spread" => &series.spread,
        other => panic!("unknown metric {other}"),
    }
}

/// Writes `forecast_<metric>.csv` files with columns
/// `lead_mtu,metric,value,model,case` (one row per lead time and model).
pub fn write_forecast_csvs(dir: &Path, entries: &[ForecastEntry], members: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for metric in METRIC_NAMES {
        let path = dir.join(format!("forecast_{metric}.csv"));
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        if metric == "error" || metric == "spread" {
            writeln!(
                out,
                "# raw quantities; a statistically consistent M={members} ensemble satisfies error/(1+1/M) = spread/(1-1/M)"
            )?;
        }
        writeln!(out, "lead_mtu,metric,value,model,case")?;
        for entry in entries {
            let vals = metric_values(&entry.series, metric);
            for (lead, v) in entry.series.lead_mtu.iter().zip(vals) {
                writeln!(
                    out,
                    "{lead:.6},{metric},{v:.12e},{},{}",
                    entry.model, entry.case
                )?;
            }
        }
        out.flush()?;
    }
    Ok(())
}

/// Writes the per-model climate distance table as JSON.
pub fn write_climate_distances(path: &Path, distances: &[ClimateDistance]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(distances)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

/// Writes pooled climate histograms with columns
/// `bin_center,density,model,case`.
pub fn write_histograms_csv(
    path: &Path,
    entries: &[(String, ClimateHistogram)],
    case: &str,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "bin_center,density,model,case")?;
    for (model, hist) in entries {
        for (i, d) in hist.density.iter().enumerate() {
            let center = 0.5 * (hist.edges[i] + hist.edges[i + 1]);
            writeln!(out, "{center:.6},{d:.12e},{model},{case}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Aggregated summary emitted by the `report` command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Summary {
    /// Climate distance rows gathered from all experiments.
    pub climate: Vec<ClimateDistance>,
    /// Metric CSV files merged into the report.
    pub forecast_files: Vec<String>,
    pub n_experiments: usize,
}

fn walk_sorted(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_sorted(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Collects experiment outputs under `input_dir` (recursively) into a merged
/// summary: climate distance JSONs are concatenated and forecast metric CSVs
/// merged per metric. An empty input directory yields an empty summary.
pub fn aggregate(input_dir: &Path, out_dir: &Path) -> Result<Summary> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    if input_dir.exists() {
        walk_sorted(input_dir, &mut files)?;
    }
    let mut summary = Summary::default();
    let mut merged: std::collections::BTreeMap<String, Vec<String>> = Default::default();

    for path in &files {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if name == "climate_distances.json" {
            let text = std::fs::read_to_string(path)?;
            let rows: Vec<ClimateDistance> = serde_json::from_str(&text)?;
            summary.climate.extend(rows);
            summary.n_experiments += 1;
        } else if name.starts_with("forecast_") && name.ends_with(".csv") {
            let text = std::fs::read_to_string(path)?;
            let rows = merged.entry(name.clone()).or_default();
            for line in text.lines() {
                if line.starts_with('#') || line.starts_with("lead_mtu") {
                    continue;
                }
                rows.push(line.to_string());
            }
            summary.n_experiments += 1;
        }
    }

    for (name, rows) in &merged {
        let path = out_dir.join(name);
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(out, "lead_mtu,metric,value,model,case")?;
        for row in rows {
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        summary.forecast_files.push(name.clone());
    }

    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}

/// Loads a climate distance table back (used by the report aggregation
/// tests and downstream tooling).
pub fn read_climate_distances(path: &Path) -> Result<Vec<ClimateDistance>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_series(n: usize) -> MetricSeries {
        MetricSeries {
            lead_mtu: (0..n).map(|i| i as f64 * 0.005).collect(),
            mse: vec![1.0; n],
            crps: vec![0.5; n],
            error: vec![0.9; n],
            spread: vec![1.1; n],
        }
    }

    #[test]
    fn forecast_csv_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ForecastEntry {
                model: "svd_gauss".into(),
                case: "c4".into(),
                series: toy_series(11),
            },
            ForecastEntry {
                model: "poly_ou".into(),
                case: "c4".into(),
                series: toy_series(11),
            },
        ];
        write_forecast_csvs(dir.path(), &entries, 50).unwrap();
        let text = std::fs::read_to_string(dir.path().join("forecast_crps.csv")).unwrap();
        let data_rows = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("lead_mtu"))
            .count();
        // n_leads x n_models
        assert_eq!(data_rows, 11 * 2);
        let spread = std::fs::read_to_string(dir.path().join("forecast_spread.csv")).unwrap();
        assert!(spread.starts_with('#'));
    }

    #[test]
    fn empty_report_aggregates_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        std::fs::create_dir_all(&input).unwrap();
        let out = dir.path().join("out");
        let summary = aggregate(&input, &out).unwrap();
        assert_eq!(summary.n_experiments, 0);
        assert!(summary.climate.is_empty());
        assert!(out.join("summary.json").exists());
    }

    #[test]
    fn aggregation_merges_climate_and_forecasts() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        let sub = input.join("exp1");
        std::fs::create_dir_all(&sub).unwrap();
        write_climate_distances(
            &sub.join("climate_distances.json"),
            &[ClimateDistance {
                model: "svd_gauss".into(),
                case: "c4".into(),
                ks: 0.069,
                hellinger: 0.16,
            }],
        )
        .unwrap();
        write_forecast_csvs(
            &sub,
            &[ForecastEntry {
                model: "svd_gauss".into(),
                case: "c4".into(),
                series: toy_series(3),
            }],
            20,
        )
        .unwrap();
        let out = dir.path().join("out");
        let summary = aggregate(&input, &out).unwrap();
        assert_eq!(summary.climate.len(), 1);
        assert_eq!(summary.climate[0].model, "svd_gauss");
        assert!(summary.forecast_files.iter().any(|f| f == "forecast_mse.csv"));
        let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
        assert!(text.contains("\"ks\": 0.069"));
        let merged = std::fs::read_to_string(out.join("forecast_crps.csv")).unwrap();
        assert_eq!(merged.lines().count(), 1 + 3);
    }
}
