//! Dataset-level operations shared by the subcommands and the experiment
//! tests: examples from scenes, per-object prediction, evaluation,
//! containment curves and latency measurement.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use boxcast::box_core::{BoxParams, Normalizer, QuantizedBox};
use boxcast::dist::{log_prob, BoxDistribution, Context, Model};
use boxcast::error::Error as CoreError;
use boxcast::fit::TrainingExample;
use boxcast::inference::{
    beam_search, dimension_conditioned_predict, quantile_box_from_sample, sample_occupancy, uncertainty_from_sample,
    BeamConfig, OccupancySample, QuantileConfig, QuantileResult,
};
use boxcast::metrics::{containment_curve, evaluate_pair, gaussian_uncertainty, EvalPair, PairMetrics};
use boxcast::synthgen::{record_rng, SceneRecord};

pub const PREDICTION_SCHEMA_VERSION: u32 = 1;
pub const SKU_SCHEMA_VERSION: u32 = 1;

/// Fixed normalizer covering every ground-truth box of the scenes: centered
/// on the corner bounding box, with one scale chosen so centers fall in
/// `[-0.5, 0.5]` and dimensions below 1.
pub fn dataset_normalizer(scenes: &[SceneRecord]) -> Result<Normalizer> {
    if scenes.is_empty() {
        bail!("empty dataset");
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in scenes {
        for c in s.gt.corners() {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    let offset = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    let scale = 2.1 * half.max(1e-3);
    Ok(Normalizer::fixed([scale; 3], offset)?)
}

pub fn to_examples(scenes: &[SceneRecord], normalizer: &Normalizer) -> Vec<TrainingExample> {
    scenes
        .iter()
        .map(|s| TrainingExample {
            context: Context::new(s.context),
            gt: s.gt,
            normalizer: *normalizer,
            symmetry: s.symmetry,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Beam,
    Quantile(f64),
    Conditioned,
    GaussianBaseline,
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(Method::Beam),
            "conditioned" => Ok(Method::Conditioned),
            "gaussian-baseline" => Ok(Method::GaussianBaseline),
            _ => {
                let q = s
                    .strip_prefix("quantile:")
                    .ok_or_else(|| anyhow!("unknown method {s:?} (beam, quantile:<q>, conditioned, gaussian-baseline)"))?;
                let q: f64 = q.parse().with_context(|| format!("bad quantile in {s:?}"))?;
                if !(q > 0.0 && q < 1.0) {
                    bail!("quantile {q} outside (0, 1)");
                }
                Ok(Method::Quantile(q))
            }
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Beam => write!(f, "beam"),
            Method::Quantile(q) => write!(f, "quantile:{q}"),
            Method::Conditioned => write!(f, "conditioned"),
            Method::GaussianBaseline => write!(f, "gaussian-baseline"),
        }
    }
}

/// Candidate SKU dimensions, per context with an optional fallback list,
/// or per scene id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkuFile {
    pub schema_version: u32,
    #[serde(default)]
    pub default: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub by_context: BTreeMap<u32, Vec<[f64; 3]>>,
    #[serde(default)]
    pub by_scene: BTreeMap<u64, Vec<[f64; 3]>>,
}

impl SkuFile {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SKU_SCHEMA_VERSION {
            bail!(
                "SKU file schema_version {} (expected {SKU_SCHEMA_VERSION})",
                self.schema_version
            );
        }
        Ok(())
    }

    pub fn candidates(&self, scene: &SceneRecord) -> Result<&[[f64; 3]]> {
        self.by_scene
            .get(&scene.id)
            .or_else(|| self.by_context.get(&scene.context))
            .or(self.default.as_ref())
            .map(Vec::as_slice)
            .ok_or_else(|| anyhow!("no SKU candidates for scene {} (context {})", scene.id, scene.context))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub beam_width: usize,
    pub k: usize,
    pub m: usize,
    /// `(alpha, beta)` of the quantile-box uncertainty to attach to each
    /// prediction.
    pub uncertainty: Option<(f64, f64)>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        let q = QuantileConfig::default();
        Self {
            beam_width: BeamConfig::default().beam_width,
            k: q.k,
            m: q.m,
            uncertainty: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRun {
    pub k: usize,
    pub m: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub schema_version: u32,
    pub scene_id: u64,
    pub context: u32,
    pub method: String,
    #[serde(rename = "box")]
    pub pred: BoxParams,
    /// Log-probability of the quantized prediction under the model.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile: Option<QuantileRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sku_index: Option<usize>,
    #[serde(default)]
    pub overflow: bool,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PREDICTION_SCHEMA_VERSION {
            bail!(
                "prediction schema_version {} (expected {PREDICTION_SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.pred.validate()?;
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the sampling stream of one scene.
pub fn object_seed(seed: u64, scene_id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(scene_id))
}

/// Occupancy sample of one scene, drawn from the scene's own stream.
pub fn occupancy_sample(d: &dyn BoxDistribution, ctx: &Context, k: usize, m: usize, seed: u64) -> Result<Arc<OccupancySample>> {
    let mut rng = record_rng(seed, 0);
    Ok(Arc::new(sample_occupancy(d, ctx, k, m, &mut rng)?))
}

fn quantile_with_retry(
    d: &dyn BoxDistribution,
    ctx: &Context,
    q: f64,
    cfg: &PredictConfig,
    seed: u64,
) -> Result<(QuantileResult, usize)> {
    let mut k = cfg.k;
    for attempt in 0..4 {
        let sample = occupancy_sample(d, ctx, k, cfg.m, seed)?;
        match quantile_box_from_sample(sample, q) {
            Ok(r) => return Ok((r, k)),
            Err(CoreError::QuantileTooHigh { .. }) if attempt < 3 => {
                log::debug!("quantile {q} too high for k = {k}; retrying with {}", 2 * k);
                k *= 2;
            }
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn score_of(d: &dyn BoxDistribution, b: &BoxParams, ctx: &Context) -> Result<(f64, QuantizedBox)> {
    let qb = d.codec().quantize(b);
    Ok((log_prob(d, &qb, ctx)?, qb))
}

/// Prediction for one scene.
pub fn predict_one(
    model: &Model,
    scene: &SceneRecord,
    method: Method,
    cfg: &PredictConfig,
    seed: u64,
    skus: Option<&SkuFile>,
) -> Result<PredictionRecord> {
    let d = model.dist();
    let ctx = Context::new(scene.context);
    let oseed = object_seed(seed, scene.id);
    let beam = BeamConfig::new(cfg.beam_width.min(d.bins() as usize));
    let mut quantile = None;
    let mut sku_index = None;
    let mut uncertainty = None;
    let (pred, overflow) = match method {
        Method::Beam => {
            let (qb, _) = beam_search(d, &ctx, &beam)?;
            (d.codec().dequantize(&qb)?, qb.any_overflow())
        }
        Method::Quantile(q) => {
            let (r, k) = quantile_with_retry(d, &ctx, q, cfg, oseed)?;
            quantile = Some(QuantileRun { k, m: cfg.m, seed: oseed });
            if let Some((a, b)) = cfg.uncertainty {
                uncertainty = Some(uncertainty_from_sample(&r.sample, a, b)?);
            }
            (r.quantile_box, false)
        }
        Method::Conditioned => {
            let skus = skus.ok_or_else(|| anyhow!("method conditioned needs a SKU file"))?;
            let p = dimension_conditioned_predict(d, &ctx, skus.candidates(scene)?, &beam)?;
            sku_index = Some(p.sku_index);
            (d.codec().dequantize(&p.qb)?, p.qb.any_overflow())
        }
        Method::GaussianBaseline => match model {
            Model::Gaussian(g) => {
                uncertainty = Some(gaussian_uncertainty(g, &ctx)?);
                (g.mean_box(&ctx)?, false)
            }
            _ => bail!("method gaussian-baseline needs a gaussian model file"),
        },
    };
    if uncertainty.is_none() && method != Method::GaussianBaseline {
        if let Some((a, b)) = cfg.uncertainty {
            let sample = occupancy_sample(d, &ctx, cfg.k, cfg.m, oseed)?;
            uncertainty = Some(uncertainty_from_sample(&sample, a, b)?);
            quantile.get_or_insert(QuantileRun {
                k: cfg.k,
                m: cfg.m,
                seed: oseed,
            });
        }
    }
    let (score, qb) = score_of(d, &pred, &ctx)?;
    Ok(PredictionRecord {
        schema_version: PREDICTION_SCHEMA_VERSION,
        scene_id: scene.id,
        context: scene.context,
        method: method.to_string(),
        pred,
        score,
        uncertainty,
        quantile,
        sku_index,
        overflow: overflow || qb.any_overflow(),
    })
}

/// Predictions in input order, computed on `workers` threads.
pub fn predict_all(
    model: &Model,
    scenes: &[SceneRecord],
    method: Method,
    cfg: &PredictConfig,
    seed: u64,
    skus: Option<&SkuFile>,
    workers: usize,
) -> Result<Vec<PredictionRecord>> {
    if method == Method::Conditioned && skus.is_none() {
        bail!("method conditioned needs a SKU file");
    }
    with_pool(workers, || {
        scenes
            .par_iter()
            .map(|s| predict_one(model, s, method, cfg, seed, skus).with_context(|| format!("scene {}", s.id)))
            .collect::<Result<Vec<_>>>()
    })?
}

pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    Ok(pool.install(f))
}

/// Per-object metric rows, joined on scene id; the scene supplies the
/// ground truth and symmetry mode.
pub fn evaluate(preds: &[PredictionRecord], scenes: &[SceneRecord]) -> Result<Vec<PairMetrics>> {
    let by_id: HashMap<u64, &SceneRecord> = scenes.iter().map(|s| (s.id, s)).collect();
    preds
        .iter()
        .map(|p| {
            let s = by_id
                .get(&p.scene_id)
                .ok_or_else(|| anyhow!("prediction for unknown scene {}", p.scene_id))?;
            Ok(evaluate_pair(&EvalPair {
                id: p.scene_id.to_string(),
                method: p.method.clone(),
                pred: p.pred,
                gt: s.gt,
                symmetry: s.symmetry,
                score: p.uncertainty,
            }))
        })
        .collect()
}

/// Quantile boxes of every scene at every `q`, from one occupancy sample
/// per scene. `out[i][j]` is scene `i` at `qs[j]`.
pub fn quantile_boxes(
    model: &Model,
    scenes: &[SceneRecord],
    qs: &[f64],
    cfg: &PredictConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<Vec<BoxParams>>> {
    let d = model.dist();
    with_pool(workers, || {
        scenes
            .par_iter()
            .map(|s| {
                let ctx = Context::new(s.context);
                let oseed = object_seed(seed, s.id);
                let sample = occupancy_sample(d, &ctx, cfg.k, cfg.m, oseed)?;
                qs.iter()
                    .map(|&q| match quantile_box_from_sample(sample.clone(), q) {
                        Ok(r) => Ok(r.quantile_box),
                        Err(CoreError::QuantileTooHigh { .. }) => {
                            Ok(quantile_with_retry(d, &ctx, q, cfg, oseed)?.0.quantile_box)
                        }
                        Err(e) => Err(e.into()),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    })?
}

/// `(q, f(q))` with `f` the fraction of quantile boxes with IoG > 0.95.
pub fn containment(
    model: &Model,
    scenes: &[SceneRecord],
    qs: &[f64],
    cfg: &PredictConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<(f64, f64)>> {
    let boxes = quantile_boxes(model, scenes, qs, cfg, seed, workers)?;
    let groups: Vec<(f64, Vec<(BoxParams, BoxParams)>)> = qs
        .iter()
        .enumerate()
        .map(|(j, &q)| (q, scenes.iter().zip(&boxes).map(|(s, b)| (b[j], s.gt)).collect()))
        .collect();
    Ok(containment_curve(&groups)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub max_ms: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Wall time of quantile-box inference over the whole batch, `repeats`
/// times, on `workers` threads.
pub fn bench_quantile(
    model: &Model,
    batch: &[SceneRecord],
    q: f64,
    cfg: &PredictConfig,
    workers: usize,
    repeats: usize,
) -> Result<LatencyStats> {
    if batch.is_empty() || repeats == 0 {
        bail!("bench needs a non-empty batch and at least one repeat");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let d = model.dist();
    let run = |rep: usize| -> Result<f64> {
        let start = Instant::now();
        let work = |s: &SceneRecord| -> Result<BoxParams> {
            let ctx = Context::new(s.context);
            let sample = occupancy_sample(d, &ctx, cfg.k, cfg.m, object_seed(rep as u64, s.id))?;
            Ok(quantile_box_from_sample(sample, q)?.quantile_box)
        };
        let out: Result<Vec<BoxParams>> = if workers <= 1 {
            batch.iter().map(work).collect()
        } else {
            pool.install(|| batch.par_iter().map(work).collect())
        };
        out?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    run(0)?;
    let mut times = (1..=repeats).map(run).collect::<Result<Vec<f64>>>()?;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        p50_ms: percentile(&times, 0.5),
        p90_ms: percentile(&times, 0.9),
        max_ms: *times.last().expect("non-empty"),
    })
}
