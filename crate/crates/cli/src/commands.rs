//! Subcommands of the `boxcast` binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use boxcast::box_core::Normalizer;
use boxcast::dist::Model;
use boxcast::fit::{fit_gaussian, fit_report, fit_tabular, FitConfig};
use boxcast::metrics::{summarize, MetricsReport, PairMetrics};
use boxcast::synthgen::{generate_dataset, DatasetSpec};

use crate::artifacts::{
    read_json, read_predictions, read_scenes, sibling, write_csv, write_json, write_predictions, write_scenes,
    RunManifest,
};
use crate::pipeline::{
    bench_quantile, containment, dataset_normalizer, predict_all, to_examples, LatencyStats, Method, PredictConfig,
    SkuFile,
};

pub const BENCH_SCHEMA_VERSION: u32 = 1;
pub const BENCH_BATCH: usize = 15;
pub const BENCH_BUDGET_SINGLE_MS: f64 = 50.0;
pub const BENCH_BUDGET_PARALLEL_MS: f64 = 15.0;
/// Latencies above this multiple of the budget are errors; between the
/// budget and this multiple they are warnings.
pub const BENCH_HARD_FACTOR: f64 = 4.0;

#[derive(Debug, Parser)]
#[command(name = "boxcast", version, about = "Probabilistic 3D box prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Seed of all sampling in this run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// JSON configuration file of the subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Primary output file; secondary outputs are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset (JSONL) from a dataset spec.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
    },
    /// Fit a model file from a scene dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the backend of the config file.
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Predict one box per scene.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// beam, quantile:<q>, conditioned or gaussian-baseline.
        #[arg(long)]
        method: String,
        /// Candidate SKU dimensions, required by `conditioned`.
        #[arg(long)]
        sku: Option<PathBuf>,
    },
    /// Per-object metrics (CSV) and per-method summary (`<out>.summary.json`).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Containment curve of quantile boxes (CSV).
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        q: Vec<f64>,
    },
    /// Quantile-box latency on a batch of scenes (JSON).
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = BENCH_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0.5)]
        q: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Tabular,
    Gaussian,
}

/// Config file of `fit`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitCommandConfig {
    pub backend: Backend,
    /// Defaults to a fixed normalizer covering the training boxes.
    pub normalizer: Option<Normalizer>,
    #[serde(flatten)]
    pub fit: FitConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetStatus {
    Pass,
    SoftFail,
    HardFail,
}

impl BudgetStatus {
    pub fn of(ms: f64, budget: f64) -> Self {
        if ms <= budget {
            BudgetStatus::Pass
        } else if ms <= BENCH_HARD_FACTOR * budget {
            BudgetStatus::SoftFail
        } else {
            BudgetStatus::HardFail
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub workers: usize,
    pub stats: LatencyStats,
    pub budget_ms: f64,
    pub status: BudgetStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub batch: usize,
    pub repeats: usize,
    pub q: f64,
    pub k: usize,
    pub m: usize,
    pub available_cores: usize,
    pub single: BenchRun,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel: Option<BenchRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub q: f64,
    pub f: f64,
    pub target: f64,
    pub deviation: f64,
}

fn load_config<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let manifest = match cli.command {
        Command::Generate { common, n } => generate(&common, n)?,
        Command::Fit { common, data, backend } => fit(&common, &data, backend)?,
        Command::Predict {
            common,
            model,
            data,
            method,
            sku,
        } => predict(&common, &model, &data, &method, sku.as_deref())?,
        Command::Eval {
            common,
            predictions,
            data,
        } => eval(&common, &predictions, &data)?,
        Command::Curve { common, model, data, q } => curve(&common, &model, &data, &q)?,
        Command::Bench {
            common,
            model,
            data,
            batch,
            repeats,
            q,
        } => bench(&common, &model, &data, batch, repeats, q)?,
    };
    let path = manifest.finish(start.elapsed())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn manifest(command: &str, common: &Common, config: &impl Serialize) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, serde_json::to_value(config)?);
    m.seed = Some(common.seed);
    m.workers = common.workers;
    m.inputs.extend(common.config.clone());
    m.outputs.push(common.out.clone());
    Ok(m)
}

fn generate(common: &Common, n: usize) -> Result<RunManifest> {
    let spec_path = common.config.as_deref().context("generate needs --config <dataset spec>")?;
    let spec: DatasetSpec = read_json(spec_path)?;
    let scenes = generate_dataset(&spec, n, common.seed)?;
    write_scenes(&common.out, &scenes)?;
    let check = read_scenes(&common.out)?;
    ensure!(check.len() == n, "wrote {} records, expected {n}", check.len());
    log::info!("generated {n} scenes");
    manifest("generate", common, &spec)
}

fn fit(common: &Common, data: &Path, backend: Option<Backend>) -> Result<RunManifest> {
    let mut cfg: FitCommandConfig = load_config(common.config.as_deref())?;
    if let Some(b) = backend {
        cfg.backend = b;
    }
    cfg.fit.validate()?;
    let scenes = read_scenes(data)?;
    let normalizer = match cfg.normalizer {
        Some(n) => n,
        None => dataset_normalizer(&scenes)?,
    };
    cfg.normalizer = Some(normalizer);
    let examples = to_examples(&scenes, &normalizer);
    let model = match cfg.backend {
        Backend::Tabular => Model::Tabular(fit_tabular(&examples, &cfg.fit)?),
        Backend::Gaussian => Model::Gaussian(fit_gaussian(&examples, &cfg.fit.quantizer, cfg.fit.context_vocab)?),
    };
    let report = fit_report(model.dist(), &examples, cfg.fit.symmetry_averaging)?;
    log::info!("fit {} examples, nll {:.4}", examples.len(), report.nll);
    crate::artifacts::write_atomic(&common.out, model.to_json().as_bytes())?;
    load_model(&common.out)?;
    let report_path = sibling(&common.out, ".report.json");
    write_json(&report_path, &report)?;
    let mut m = manifest("fit", common, &cfg)?;
    m.inputs.push(data.to_path_buf());
    m.outputs.push(report_path);
    Ok(m)
}

fn predict(common: &Common, model: &Path, data: &Path, method: &str, sku: Option<&Path>) -> Result<RunManifest> {
    let method: Method = method.parse()?;
    let cfg: PredictConfig = load_config(common.config.as_deref())?;
    let skus = match sku {
        Some(p) => {
            let f: SkuFile = read_json(p)?;
            f.validate()?;
            Some(f)
        }
        None if method == Method::Conditioned => bail!("method conditioned needs a SKU file (--sku)"),
        None => None,
    };
    let model_v = load_model(model)?;
    let scenes = read_scenes(data)?;
    let preds = predict_all(&model_v, &scenes, method, &cfg, common.seed, skus.as_ref(), common.workers)?;
    write_predictions(&common.out, &preds)?;
    let check = read_predictions(&common.out)?;
    ensure!(check.len() == scenes.len(), "wrote {} predictions, expected {}", check.len(), scenes.len());
    log::info!("{} predictions with {method}", preds.len());
    let mut m = manifest("predict", common, &cfg)?;
    m.config["method"] = serde_json::Value::String(method.to_string());
    m.inputs.extend([model.to_path_buf(), data.to_path_buf()]);
    m.inputs.extend(sku.map(Path::to_path_buf));
    Ok(m)
}

/// Summary per method, in order of first appearance.
pub fn summarize_by_method(rows: &[PairMetrics]) -> Result<Vec<MetricsReport>> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .iter()
        .map(|m| {
            let subset: Vec<PairMetrics> = rows.iter().filter(|r| r.method == *m).cloned().collect();
            Ok(summarize(m, &subset)?)
        })
        .collect()
}

fn eval(common: &Common, predictions: &[PathBuf], data: &Path) -> Result<RunManifest> {
    ensure!(!predictions.is_empty(), "eval needs at least one --predictions file");
    let scenes = read_scenes(data)?;
    let mut rows = Vec::new();
    for p in predictions {
        rows.extend(crate::pipeline::evaluate(&read_predictions(p)?, &scenes)?);
    }
    let summary = summarize_by_method(&rows)?;
    for s in &summary {
        log::info!("{}: IoU {:.4} IoG {:.4} F1 {:.4}", s.method, s.mean_iou, s.mean_iog, s.f1);
    }
    write_csv(&common.out, &rows)?;
    let summary_path = sibling(&common.out, ".summary.json");
    write_json(&summary_path, &summary)?;
    let mut m = manifest("eval", common, &serde_json::Value::Null)?;
    m.inputs.extend(predictions.iter().cloned());
    m.inputs.push(data.to_path_buf());
    m.outputs.push(summary_path);
    Ok(m)
}

fn curve(common: &Common, model: &Path, data: &Path, qs: &[f64]) -> Result<RunManifest> {
    ensure!(!qs.is_empty(), "curve needs at least one q");
    for &q in qs {
        ensure!(q > 0.0 && q < 1.0, "quantile {q} outside (0, 1)");
    }
    let cfg: PredictConfig = load_config(common.config.as_deref())?;
    let model_v = load_model(model)?;
    let scenes = read_scenes(data)?;
    let points = containment(&model_v, &scenes, qs, &cfg, common.seed, common.workers)?;
    let rows: Vec<CurveRow> = points
        .iter()
        .map(|&(q, f)| CurveRow {
            q,
            f,
            target: 1.0 - q,
            deviation: f - (1.0 - q),
        })
        .collect();
    write_csv(&common.out, &rows)?;
    let mut m = manifest("curve", common, &cfg)?;
    m.config["q"] = serde_json::to_value(qs)?;
    m.inputs.extend([model.to_path_buf(), data.to_path_buf()]);
    Ok(m)
}

fn bench(common: &Common, model: &Path, data: &Path, batch: usize, repeats: usize, q: f64) -> Result<RunManifest> {
    ensure!(q > 0.0 && q < 1.0, "quantile {q} outside (0, 1)");
    let cfg: PredictConfig = load_config(common.config.as_deref())?;
    let model_v = load_model(model)?;
    let scenes = read_scenes(data)?;
    ensure!(scenes.len() >= batch, "dataset has {} scenes, batch needs {batch}", scenes.len());
    let report = bench_report(&model_v, &scenes[..batch], q, &cfg, common.workers, repeats)?;
    write_json(&common.out, &report)?;
    let runs = std::iter::once(&report.single).chain(report.parallel.as_ref());
    for r in runs {
        match r.status {
            BudgetStatus::Pass => {}
            BudgetStatus::SoftFail => log::warn!(
                "p50 {:.1} ms with {} workers exceeds the {} ms budget",
                r.stats.p50_ms,
                r.workers,
                r.budget_ms
            ),
            BudgetStatus::HardFail => bail!(
                "p50 {:.1} ms with {} workers exceeds {}x the {} ms budget",
                r.stats.p50_ms,
                r.workers,
                BENCH_HARD_FACTOR,
                r.budget_ms
            ),
        }
    }
    let mut m = manifest("bench", common, &cfg)?;
    m.config["q"] = q.into();
    m.config["batch"] = batch.into();
    m.config["repeats"] = repeats.into();
    m.inputs.extend([model.to_path_buf(), data.to_path_buf()]);
    Ok(m)
}

/// Single-threaded latency, plus latency on `workers` threads when more
/// than one is requested.
pub fn bench_report(
    model: &Model,
    batch: &[boxcast::synthgen::SceneRecord],
    q: f64,
    cfg: &PredictConfig,
    workers: usize,
    repeats: usize,
) -> Result<BenchReport> {
    let run = |w: usize, budget: f64| -> Result<BenchRun> {
        let stats = bench_quantile(model, batch, q, cfg, w, repeats)?;
        Ok(BenchRun {
            workers: w,
            stats,
            budget_ms: budget,
            status: BudgetStatus::of(stats.p50_ms, budget),
        })
    };
    let single = run(1, BENCH_BUDGET_SINGLE_MS)?;
    let parallel = if workers > 1 {
        Some(run(workers, BENCH_BUDGET_PARALLEL_MS)?)
    } else {
        None
    };
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        batch: batch.len(),
        repeats,
        q,
        k: cfg.k,
        m: cfg.m,
        available_cores: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        single,
        parallel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_status_bands() {
        assert_eq!(BudgetStatus::of(10.0, 15.0), BudgetStatus::Pass);
        assert_eq!(BudgetStatus::of(30.0, 15.0), BudgetStatus::SoftFail);
        assert_eq!(BudgetStatus::of(61.0, 15.0), BudgetStatus::HardFail);
    }

    #[test]
    fn fit_config_defaults_and_overrides() {
        let c: FitCommandConfig = serde_json::from_str(r#"{"backend":"gaussian","alpha":0.5}"#).unwrap();
        assert_eq!(c.backend, Backend::Gaussian);
        assert_eq!(c.fit.alpha, 0.5);
        assert_eq!(c.fit.prefix_buckets, FitConfig::default().prefix_buckets);
        assert!(c.normalizer.is_none());
    }

    #[test]
    fn cli_parses_common_flags() {
        let cli = Cli::try_parse_from([
            "boxcast", "curve", "--model", "m.json", "--data", "d.jsonl", "--out", "c.csv", "--q", "0.2,0.4", "--seed",
            "3",
        ])
        .unwrap();
        match cli.command {
            Command::Curve { common, q, .. } => {
                assert_eq!(q, vec![0.2, 0.4]);
                assert_eq!(common.seed, 3);
                assert_eq!(common.workers, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
