use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ap::ApResult;
use super::diagnose::{ErrorBreakdown, ErrorKind};
use super::EvalError;

/// Everything evaluated for one experiment: named AP tables (e.g. `ap50`)
/// and an optional error breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEval {
    pub experiment: String,
    pub ap: Vec<(String, ApResult)>,
    pub breakdown: Option<ErrorBreakdown>,
}

/// One `metrics.csv` line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub category: String,
    pub metric: String,
    pub value: f64,
}

/// Rows in a fixed order: experiments as given, then per AP table the
/// per-category values followed by the `all` mean, then the breakdown
/// fractions under category `all`.
pub fn metric_rows(evals: &[ExperimentEval], category_names: &[String]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for e in evals {
        let row = |category: &str, metric: String, value: f64| MetricRow {
            experiment: e.experiment.clone(),
            category: category.to_string(),
            metric,
            value,
        };
        for (metric, ap) in &e.ap {
            for (c, v) in ap.per_category.iter().enumerate() {
                if let Some(v) = v {
                    let name = category_names
                        .get(c)
                        .cloned()
                        .unwrap_or_else(|| c.to_string());
                    rows.push(row(&name, metric.clone(), *v));
                }
            }
            rows.push(row("all", metric.clone(), ap.map));
        }
        if let Some(b) = &e.breakdown {
            for k in ErrorKind::ALL {
                rows.push(row("all", format!("frac_{}", k.name()), b.fraction(k)));
            }
        }
    }
    rows
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["experiment", "category", "metric", "value"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Writes `metrics.csv` and `breakdown.json` (experiment to breakdown)
/// into `dir`.
pub fn emit_report(
    dir: &Path,
    evals: &[ExperimentEval],
    category_names: &[String],
) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(
        &dir.join("metrics.csv"),
        &metric_rows(evals, category_names),
    )?;
    let breakdowns: BTreeMap<&str, &ErrorBreakdown> = evals
        .iter()
        .filter_map(|e| e.breakdown.as_ref().map(|b| (e.experiment.as_str(), b)))
        .collect();
    fs::write(
        dir.join("breakdown.json"),
        serde_json::to_string_pretty(&breakdowns)? + "\n",
    )?;
    Ok(())
}

pub fn read_breakdowns(path: &Path) -> Result<BTreeMap<String, ErrorBreakdown>, EvalError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ExperimentEval> {
        vec![
            ExperimentEval {
                experiment: "3fc".into(),
                ap: vec![(
                    "ap50".into(),
                    ApResult {
                        per_category: vec![Some(0.5), None, Some(1.0 / 3.0)],
                        map: 5.0 / 12.0,
                    },
                )],
                breakdown: Some(ErrorBreakdown::from_counts([3, 2, 1, 0, 1], 7)),
            },
            ExperimentEval {
                experiment: "1fc".into(),
                ap: vec![],
                breakdown: Some(ErrorBreakdown::from_counts([1, 1, 1, 0, 0], 3)),
            },
        ]
    }

    #[test]
    fn empty_input_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &[], &[]).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, "experiment,category,metric,value\n");
        assert!(read_breakdowns(&dir.path().join("breakdown.json"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let evals = sample();
        emit_report(dir.path(), &evals, &names).unwrap();

        let rows = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(rows, metric_rows(&evals, &names));
        assert_eq!(rows[0].category, "a");
        assert_eq!(rows[1].category, "c");
        assert_eq!(rows[2].category, "all");

        let back = read_breakdowns(&dir.path().join("breakdown.json")).unwrap();
        assert_eq!(back["3fc"], *evals[0].breakdown.as_ref().unwrap());
        assert_eq!(back["1fc"], *evals[1].breakdown.as_ref().unwrap());
        for b in back.values() {
            assert!((b.fraction_sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn breakdown_fraction_rows_sum_to_one() {
        let rows = metric_rows(&sample(), &[]);
        for exp in ["3fc", "1fc"] {
            let s: f64 = rows
                .iter()
                .filter(|r| r.experiment == exp && r.metric.starts_with("frac_"))
                .map(|r| r.value)
                .sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
