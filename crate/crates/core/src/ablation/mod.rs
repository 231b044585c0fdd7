//! The experiment-matrix runner: for every entry and seed, train a NoC on
//! the synthetic data, fit its head, score, suppress, evaluate.

mod config;
mod pipeline;

pub use config::{
    BackboneKind, ExperimentMatrix, HeadKind, InitKind, MatrixEntry, Metric, PipelineConfig,
    ResolvedEntry, SplitSize,
};
pub use pipeline::{
    evaluate_detections, pretrain_backbone, run_metrics, train_entry, RoiImage, RunMetrics,
    SeedContext, TrainedEntry,
};

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::DetectError;
use crate::eval::{emit_report, ErrorBreakdown, ErrorKind, EvalError, ExperimentEval};
use crate::noc::{NocError, NocNet};
use crate::pyramid::PyramidError;
use crate::synth::{DatasetManifest, SynthError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Noc(#[from] NocError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Outcome of one (entry, seed) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub entry: String,
    pub seed: u64,
    pub outcome: Result<RunMetrics, String>,
}

/// Mean and sample standard deviation over successful seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub entry: String,
    pub spec: String,
    pub init: InitKind,
    pub head: HeadKind,
    pub split: SplitSize,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub ap50: Option<MeanSd>,
    pub ap75: Option<MeanSd>,
    pub coco: Option<MeanSd>,
    /// Per-run error fractions, in [`ErrorKind::ALL`] order.
    pub fractions: Vec<Option<MeanSd>>,
    /// Counts summed over seeds.
    pub pooled: Option<ErrorBreakdown>,
    pub first_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub matrix: String,
    pub metrics: Vec<Metric>,
    pub seeds: Vec<u64>,
    /// Entry-major: all seeds of entry 0, then entry 1, ...
    pub runs: Vec<RunRecord>,
    pub summary: Vec<EntrySummary>,
}

impl AblationResult {
    pub fn entry(&self, name: &str) -> Option<&EntrySummary> {
        self.summary.iter().find(|s| s.entry == name)
    }

    pub fn runs_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.entry == name)
    }
}

/// Worker count from `NOC_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("NOC_THREADS")
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

fn run_seed(
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &PipelineConfig,
    entries: &[ResolvedEntry],
    seed: u64,
) -> Vec<RunRecord> {
    let started = std::time::Instant::now();
    let ctx = match SeedContext::prepare(manifest, root, cfg, entries, seed) {
        Ok(c) => c,
        Err(e) => {
            let reason = format!("seed preparation failed: {e}");
            log::warn!("seed {seed}: {reason}");
            return entries
                .iter()
                .map(|en| RunRecord {
                    entry: en.name.clone(),
                    seed,
                    outcome: Err(reason.clone()),
                })
                .collect();
        }
    };
    log::info!(
        "seed {seed}: prepared in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    let mut nets: BTreeMap<usize, NocNet> = BTreeMap::new();
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let t = std::time::Instant::now();
        let outcome = match e.donor {
            Some(d) if !nets.contains_key(&d) => {
                Err(format!("donor {} has no trained net", entries[d].name))
            }
            _ => train_entry(&ctx, cfg, e, e.donor.map(|d| &nets[&d]))
                .and_then(|trained| {
                    let m = run_metrics(&trained, manifest)?;
                    if let Some(net) = trained.net {
                        nets.insert(e.index, net);
                    }
                    Ok(m)
                })
                .map_err(|err| err.to_string()),
        };
        match &outcome {
            Ok(m) => log::info!(
                "seed {seed} {}: mAP50 {:.4} loc {:.3} ({:.1}s)",
                e.name,
                m.ap50.map,
                m.breakdown.fraction(ErrorKind::Loc),
                t.elapsed().as_secs_f64()
            ),
            Err(err) => log::warn!("seed {seed} {}: failed: {err}", e.name),
        }
        records.push(RunRecord {
            entry: e.name.clone(),
            seed,
            outcome,
        });
    }
    records
}

fn summarize(entry: &ResolvedEntry, runs: &[&RunRecord]) -> EntrySummary {
    let ok: Vec<&RunMetrics> = runs
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .collect();
    let stat =
        |f: &dyn Fn(&RunMetrics) -> f64| MeanSd::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    let pooled = (!ok.is_empty()).then(|| {
        let counts = ErrorKind::ALL.map(|k| ok.iter().map(|m| m.breakdown.count(k)).sum());
        ErrorBreakdown::from_counts(counts, ok.iter().map(|m| m.breakdown.n_gt).sum())
    });
    EntrySummary {
        entry: entry.name.clone(),
        spec: entry.spec.to_string(),
        init: entry.init,
        head: entry.head,
        split: entry.split,
        seeds_ok: ok.len(),
        seeds_failed: runs.len() - ok.len(),
        ap50: stat(&|m| m.ap50.map),
        ap75: stat(&|m| m.ap75.map),
        coco: stat(&|m| m.coco.map),
        fractions: ErrorKind::ALL
            .iter()
            .map(|&k| stat(&|m| m.breakdown.fraction(k)))
            .collect(),
        pooled,
        first_error: runs.iter().find_map(|r| r.outcome.as_ref().err().cloned()),
    }
}

/// Runs every entry for every seed. Seeds run in parallel (capped by
/// `NOC_THREADS`); entries of one seed run in order so identity-initialized
/// entries can use their donor. A failing (entry, seed) is recorded and the
/// run continues.
pub fn run_ablation(
    matrix: &ExperimentMatrix,
    manifest: &DatasetManifest,
    root: &Path,
    seeds: &[u64],
) -> Result<AblationResult, AblationError> {
    let entries = matrix.resolve(manifest.n_categories())?;
    if seeds.is_empty() {
        return Err(AblationError::Config("no seeds given".into()));
    }
    let work = || -> Vec<Vec<RunRecord>> {
        seeds
            .par_iter()
            .map(|&s| run_seed(manifest, root, &matrix.pipeline, &entries, s))
            .collect()
    };
    let per_seed = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| AblationError::Stage(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut runs = Vec::with_capacity(entries.len() * seeds.len());
    for i in 0..entries.len() {
        for seed_runs in &per_seed {
            runs.push(seed_runs[i].clone());
        }
    }
    let summary = entries
        .iter()
        .map(|e| {
            summarize(
                e,
                &runs
                    .iter()
                    .filter(|r| r.entry == e.name)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    Ok(AblationResult {
        matrix: matrix.name.clone(),
        metrics: matrix.metrics.clone(),
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

/// The serde name of a unit enum variant.
fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn ap_metrics(metrics: &[Metric]) -> Vec<(Metric, &'static str)> {
    [
        (Metric::Ap50, "ap50"),
        (Metric::Ap75, "ap75"),
        (Metric::Coco, "coco"),
    ]
    .into_iter()
    .filter(|(m, _)| metrics.contains(m))
    .collect()
}

/// One row per entry with mean and sd over seeds of each requested metric.
pub fn write_results_csv(path: &Path, result: &AblationResult) -> Result<(), AblationError> {
    let aps = ap_metrics(&result.metrics);
    let diag = result.metrics.contains(&Metric::Diagnose);
    let mut header: Vec<String> = [
        "entry",
        "spec",
        "init",
        "head",
        "split",
        "seeds_ok",
        "seeds_failed",
    ]
    .map(String::from)
    .to_vec();
    for (_, name) in &aps {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_sd"));
    }
    if diag {
        for k in ErrorKind::ALL {
            header.push(format!("{}_mean", k.name()));
            header.push(format!("{}_sd", k.name()));
        }
    }
    header.push("error".into());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for s in &result.summary {
        let mut row = vec![
            s.entry.clone(),
            s.spec.clone(),
            label(&s.init),
            label(&s.head),
            label(&s.split),
            s.seeds_ok.to_string(),
            s.seeds_failed.to_string(),
        ];
        let mut push = |m: Option<MeanSd>| match m {
            Some(m) => {
                row.push(fmt(m.mean));
                row.push(fmt(m.sd));
            }
            None => row.extend([String::new(), String::new()]),
        };
        for (metric, _) in &aps {
            push(match metric {
                Metric::Ap50 => s.ap50,
                Metric::Ap75 => s.ap75,
                _ => s.coco,
            });
        }
        if diag {
            for f in &s.fractions {
                push(*f);
            }
        }
        row.push(s.first_error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (entry, seed) with the headline numbers.
pub fn write_runs_csv(path: &Path, result: &AblationResult) -> Result<(), AblationError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["entry", "seed", "status", "ap50", "ap75", "coco"]
        .map(String::from)
        .to_vec();
    header.extend(ErrorKind::ALL.iter().map(|k| k.name().to_string()));
    header.extend(["n_gt", "total", "init_loss", "final_loss", "error"].map(String::from));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    for r in &result.runs {
        let mut row = vec![r.entry.clone(), r.seed.to_string()];
        match &r.outcome {
            Ok(m) => {
                row.extend([
                    "ok".to_string(),
                    fmt(m.ap50.map),
                    fmt(m.ap75.map),
                    fmt(m.coco.map),
                ]);
                row.extend(
                    ErrorKind::ALL
                        .iter()
                        .map(|&k| m.breakdown.count(k).to_string()),
                );
                row.extend([
                    m.breakdown.n_gt.to_string(),
                    m.breakdown.total.to_string(),
                    opt(m.init_loss),
                    opt(m.final_loss),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(
                    String::new(),
                    3 + ErrorKind::ALL.len() + 4,
                ));
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `runs.csv`, `metrics.csv` (per run and category)
/// and `breakdown.json` (per run and pooled per entry) into `dir`.
pub fn write_outputs(
    dir: &Path,
    result: &AblationResult,
    category_names: &[String],
) -> Result<(), AblationError> {
    std::fs::create_dir_all(dir)?;
    write_results_csv(&dir.join("results.csv"), result)?;
    write_runs_csv(&dir.join("runs.csv"), result)?;
    let aps = ap_metrics(&result.metrics);
    let diag = result.metrics.contains(&Metric::Diagnose);
    let mut evals: Vec<ExperimentEval> = Vec::new();
    for r in &result.runs {
        if let Ok(m) = &r.outcome {
            evals.push(ExperimentEval {
                experiment: format!("{}/seed{}", r.entry, r.seed),
                ap: aps
                    .iter()
                    .map(|(metric, name)| {
                        let ap = match metric {
                            Metric::Ap50 => &m.ap50,
                            Metric::Ap75 => &m.ap75,
                            _ => &m.coco,
                        };
                        (name.to_string(), ap.clone())
                    })
                    .collect(),
                breakdown: diag.then(|| m.breakdown.clone()),
            });
        }
    }
    if diag {
        for s in &result.summary {
            if let Some(b) = &s.pooled {
                evals.push(ExperimentEval {
                    experiment: s.entry.clone(),
                    ap: vec![],
                    breakdown: Some(b.clone()),
                });
            }
        }
    }
    emit_report(dir, &evals, category_names)?;
    Ok(())
}
