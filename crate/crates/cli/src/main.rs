use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use noc_core::ablation::{
    run_ablation, run_metrics, train_entry, write_outputs, ExperimentMatrix, SeedContext,
};
use noc_core::detect::Detection;
use noc_core::eval::{
    ap_at, coco_ap, coco_thresholds, diagnose, emit_report, ErrorKind, ExperimentEval,
    Interpolation,
};
use noc_core::noc::save_checkpoint;
use noc_core::synth::{generate_dataset, DatasetManifest, Split, SynthConfig};

/// Region classifier networks on shared feature maps, on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "noc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset: manifest.json plus tensor blobs.
    Generate(GenerateArgs),
    /// Train one matrix entry for one seed and write its artifacts.
    Train(TrainArgs),
    /// Average precision of a detections file against ground truth.
    Eval(EvalArgs),
    /// Error breakdown of the top-ranked detections.
    Diagnose(DiagnoseArgs),
    /// Run an experiment matrix over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct Overrides {
    /// Override a config value, e.g. `--set pipeline.train.epochs=2`. The
    /// value is read as TOML, falling back to a plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Synth config (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for manifest.json and images/.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment matrix (TOML).
    #[arg(long)]
    matrix: PathBuf,
    /// Dataset directory or manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Entry to train; defaults to the first. Donor entries are trained
    /// first when needed.
    #[arg(long)]
    entry: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory: model/, svm.json, detections.jsonl, metrics.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON-lines detections.
    #[arg(long)]
    detections: PathBuf,
    /// Dataset directory or manifest.json; test split is used.
    #[arg(long)]
    gt: PathBuf,
    /// IoU threshold for a true positive. Repeatable.
    #[arg(long = "iou", default_values_t = vec![0.5])]
    iou: Vec<f64>,
    /// Also report AP averaged over IoU 0.50:0.05:0.95.
    #[arg(long)]
    coco: bool,
    /// 11-point interpolation instead of all points.
    #[arg(long)]
    eleven_point: bool,
    /// Write metrics.csv here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Write breakdown.json and metrics.csv here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// A count `N` (seeds 0..N-1) or a comma-separated list such as `3,8,11`.
    #[arg(long, default_value = "1", value_parser = parse_seeds)]
    seeds: Seeds,
    /// Output directory for results.csv, runs.csv, metrics.csv and
    /// breakdown.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let s = s.trim();
    if s.contains(',') {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|e| format!("seed {p:?}: {e}"))
            })
            .collect::<Result<_, _>>()
            .map(Seeds)
    } else {
        let n: u64 = s.parse().map_err(|e| format!("seed count {s:?}: {e}"))?;
        if n == 0 {
            return Err("seed count must be positive".into());
        }
        Ok(Seeds((0..n).collect()))
    }
}

/// Failures split by exit code: bad invocations and configs exit 2,
/// everything else 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| anyhow!("empty key in {key:?}"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{key}: {p} is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Reads a TOML file (or nothing) and applies `--set` overrides.
fn load_table(path: Option<&Path>, overrides: &Overrides) -> Result<toml::Table, Failure> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(usage)?;
            text.parse()
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(usage)?
        }
        None => toml::Table::new(),
    };
    for kv in &overrides.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set {kv:?}: expected KEY=VALUE")))?;
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        set_dotted(&mut table, k.trim(), value).map_err(usage)?;
    }
    Ok(table)
}

fn load_matrix(path: &Path, overrides: &Overrides) -> Result<ExperimentMatrix, Failure> {
    let table = load_table(Some(path), overrides)?;
    let text = toml::to_string(&table).map_err(usage)?;
    ExperimentMatrix::from_toml(&text)
        .with_context(|| format!("matrix {}", path.display()))
        .map_err(usage)
}

fn read_detections(path: &Path) -> anyhow::Result<Vec<Detection>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed detection", path.display(), i + 1))?;
        if !(d.score.is_finite() && d.x2 > d.x1 && d.y2 > d.y1) {
            bail!("{}:{}: invalid box or score", path.display(), i + 1);
        }
        out.push(d);
    }
    Ok(out)
}

fn write_detections(path: &Path, dets: &[Detection]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<(), Failure> {
    let mut table = load_table(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg: SynthConfig = table.try_into().context("synth config").map_err(usage)?;
    cfg.validate().map_err(usage)?;
    let m = generate_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} images ({} train, {} test) to {}",
        m.images.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let matrix = load_matrix(&a.matrix, &a.overrides)?;
    let (manifest, root) = DatasetManifest::load(&a.data)?;
    let entries = matrix.resolve(manifest.n_categories()).map_err(usage)?;
    let target = match &a.entry {
        Some(name) => entries
            .iter()
            .position(|e| &e.name == name)
            .ok_or_else(|| usage(anyhow!("no entry named {name}")))?,
        None => 0,
    };
    let mut chain = vec![target];
    while let Some(d) = entries[*chain.last().unwrap()].donor {
        chain.push(d);
    }
    chain.reverse();
    let needed: Vec<_> = chain.iter().map(|&i| entries[i].clone()).collect();
    let ctx = SeedContext::prepare(&manifest, &root, &matrix.pipeline, &needed, a.seed)?;
    let mut donor = None;
    let mut last = None;
    for e in &needed {
        let trained = train_entry(&ctx, &matrix.pipeline, e, donor.as_ref())?;
        donor = trained.net.clone();
        last = Some(trained);
    }
    let trained = last.expect("chain is non-empty");
    fs::create_dir_all(&a.out)?;
    if let Some(net) = &trained.net {
        save_checkpoint(net, a.out.join("model"))?;
    }
    if let Some(svm) = &trained.svm {
        fs::write(
            a.out.join("svm.json"),
            serde_json::to_string_pretty(svm)? + "\n",
        )?;
    }
    write_detections(&a.out.join("detections.jsonl"), &trained.detections)?;
    let metrics = run_metrics(&trained, &manifest)?;
    fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    println!(
        "{}: mAP@0.5 {:.4}  mAP@0.75 {:.4}  COCO {:.4}  ({} detections)",
        entries[target].name,
        metrics.ap50.map,
        metrics.ap75.map,
        metrics.coco.map,
        metrics.n_detections
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    if let Some(t) = a.iou.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(usage(anyhow!("--iou {t} not in [0, 1]")));
    }
    let dets = read_detections(&a.detections)?;
    let (manifest, _) = DatasetManifest::load(&a.gt)?;
    let gt = manifest.ground_truth(Split::Test);
    let n = manifest.n_categories();
    let interp = if a.eleven_point {
        Interpolation::ElevenPoint
    } else {
        Interpolation::AllPoints
    };
    let mut tables: Vec<(String, _)> = a
        .iou
        .iter()
        .map(|&t| (format!("ap@{t}"), ap_at(&dets, &gt, n, t, interp)))
        .collect();
    if a.coco {
        tables.push((
            format!(
                "ap@[{:.2}:{:.2}]",
                coco_thresholds()[0],
                coco_thresholds()[9]
            ),
            coco_ap(&dets, &gt, n),
        ));
    }
    print!("{:<16}", "category");
    for (name, _) in &tables {
        print!(" {name:>14}");
    }
    println!();
    for c in 0..n {
        print!("{:<16}", manifest.categories[c]);
        for (_, t) in &tables {
            match t.per_category[c] {
                Some(v) => print!(" {v:>14.4}"),
                None => print!(" {:>14}", "-"),
            }
        }
        println!();
    }
    print!("{:<16}", "mean");
    for (_, t) in &tables {
        print!(" {:>14.4}", t.map);
    }
    println!();
    if let Some(out) = &a.out {
        let e = ExperimentEval {
            experiment: "eval".into(),
            ap: tables,
            breakdown: None,
        };
        emit_report(out, &[e], &manifest.categories)?;
    }
    Ok(())
}

fn diagnose_cmd(a: &DiagnoseArgs) -> Result<(), Failure> {
    let dets = read_detections(&a.detections)?;
    let (manifest, _) = DatasetManifest::load(&a.gt)?;
    let gt = manifest.ground_truth(Split::Test);
    let b = diagnose(&dets, &gt, &manifest.similarity, manifest.n_categories())?;
    for k in ErrorKind::ALL {
        println!(
            "{:<4} {:>6} {:>8.2}%",
            k.name(),
            b.count(k),
            100.0 * b.fraction(k)
        );
    }
    println!("pooled {} of {} ground-truth labels", b.total, b.n_gt);
    if let Some(out) = &a.out {
        let e = ExperimentEval {
            experiment: "diagnose".into(),
            ap: vec![],
            breakdown: Some(b),
        };
        emit_report(out, &[e], &manifest.categories)?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<(), Failure> {
    let matrix = load_matrix(&a.matrix, &a.overrides)?;
    let (manifest, root) = DatasetManifest::load(&a.data)?;
    matrix.resolve(manifest.n_categories()).map_err(usage)?;
    let result = run_ablation(&matrix, &manifest, &root, &a.seeds.0)?;
    write_outputs(&a.out, &result, &manifest.categories)?;
    println!(
        "{:<20} {:>6} {:>16} {:>8}",
        "entry", "seeds", "mAP@0.5", "loc"
    );
    for s in &result.summary {
        let ap = s
            .ap50
            .map(|m| format!("{:.4} ± {:.4}", m.mean, m.sd))
            .unwrap_or_else(|| "-".into());
        let loc = s.fractions[1]
            .map(|m| format!("{:.3}", m.mean))
            .unwrap_or_else(|| "-".into());
        println!("{:<20} {:>6} {:>16} {:>8}", s.entry, s.seeds_ok, ap, loc);
        if let Some(e) = &s.first_error {
            println!("  failed: {e}");
        }
    }
    println!("results in {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: usage: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: runtime: {e:#}");
            ExitCode::from(1)
        }
    }
}
