//! Count-based maximum-likelihood fitting of tabular chains, plus the
//! Gaussian baseline and diagnostic losses.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::box_core::{
    enumerate_equivalent_params, quantize_box, BoxCodec, BoxParams, Normalizer, QuantizedBox, Quantizer,
    SymmetryMode, NUM_PARAMS,
};
use crate::dist::{
    expectation_refine, log_prob, prefix_key, sample, BoxDistribution, Context, GaussianBaseline, GaussianRow,
    ParamOrder, SparseRow, TabularChain,
};
use crate::dist::RowKey;
use crate::error::{Error, Result};
use crate::geometry::iou;

/// Least common multiple of 1..=24: every equivalence-set size divides it,
/// so per-target weights `1/|B|` are exact integers in these units.
const WEIGHT_UNIT: u64 = 5_354_228_880;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context: Context,
    pub gt: BoxParams,
    pub normalizer: Normalizer,
    pub symmetry: SymmetryMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub alpha: f64,
    pub prefix_buckets: u32,
    pub symmetry_averaging: bool,
    pub quantizer: Quantizer,
    pub param_order: ParamOrder,
    /// Defaults to one past the largest context id in the data.
    pub context_vocab: Option<u32>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            prefix_buckets: 8,
            symmetry_averaging: true,
            quantizer: Quantizer::default(),
            param_order: ParamOrder::default(),
            context_vocab: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("smoothing alpha {} must be > 0", self.alpha)));
        }
        self.quantizer.validate()
    }
}

/// Quantized supervision targets of one example with their weights.
///
/// With averaging, every member of the equivalence set gets weight `1/|B|`;
/// otherwise the example yields its own box with weight 1.
pub fn build_targets(ex: &TrainingExample, quantizer: &Quantizer, averaging: bool) -> Vec<(QuantizedBox, f64)> {
    let members = if averaging {
        enumerate_equivalent_params(&ex.gt, ex.symmetry)
    } else {
        vec![ex.gt]
    };
    let w = 1.0 / members.len() as f64;
    members
        .iter()
        .map(|b| (quantize_box(b, &ex.normalizer, quantizer, ex.symmetry), w))
        .collect()
}

fn shared_codec(data: &[TrainingExample], quantizer: &Quantizer) -> Result<BoxCodec> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    if data
        .iter()
        .any(|e| e.normalizer != first.normalizer || e.symmetry != first.symmetry)
    {
        return Err(Error::InvalidConfig(
            "all examples must share one normalizer and symmetry mode".into(),
        ));
    }
    Ok(BoxCodec::new(first.normalizer, quantizer.clone(), first.symmetry))
}

fn vocab_for(data: &[TrainingExample], requested: Option<u32>) -> Result<u32> {
    let needed = data.iter().map(|e| e.context.id).max().unwrap_or(0) + 1;
    match requested {
        Some(v) if v < needed => Err(Error::InvalidConfig(format!(
            "context vocab {v} smaller than largest id {}",
            needed - 1
        ))),
        Some(v) => Ok(v),
        None => Ok(needed),
    }
}

type Counts = BTreeMap<u32, u64>;

fn smoothed_row(counts: &Counts, alpha: f64, bins: u32) -> SparseRow {
    let unit = WEIGHT_UNIT as f64;
    let total: u64 = counts.values().sum();
    let denom = total as f64 / unit + alpha * bins as f64;
    SparseRow {
        default: alpha / denom,
        entries: counts
            .iter()
            .map(|(&b, &c)| (b, (c as f64 / unit + alpha) / denom))
            .collect(),
    }
}

/// Fits conditional tables as smoothed weighted counts:
/// `p(b) = (c_b + alpha) / (sum_b c_b + alpha * bins)` per
/// `(context, step, prefix bucket)` row, with per-step marginals as backoff.
///
/// Counts are accumulated as integers so the result does not depend on the
/// order of `data`.
pub fn fit_tabular(data: &[TrainingExample], cfg: &FitConfig) -> Result<TabularChain> {
    cfg.validate()?;
    let codec = shared_codec(data, &cfg.quantizer)?;
    let vocab = vocab_for(data, cfg.context_vocab)?;
    let bins = codec.bins();
    let mut chain = TabularChain::empty(codec, cfg.param_order, vocab, cfg.prefix_buckets, cfg.alpha)?;

    let mut rows: HashMap<(u32, u8, u128), Counts> = HashMap::new();
    let mut marginals: HashMap<(u32, u8), Counts> = HashMap::new();
    for ex in data {
        let targets = build_targets(ex, &cfg.quantizer, cfg.symmetry_averaging);
        let w = WEIGHT_UNIT / targets.len() as u64;
        for (qb, _) in &targets {
            let steps = cfg.param_order.to_steps(qb);
            for s in 0..NUM_PARAMS {
                let key = prefix_key(&steps[..s], bins, cfg.prefix_buckets);
                *rows
                    .entry((ex.context.id, s as u8, key))
                    .or_default()
                    .entry(steps[s])
                    .or_default() += w;
                *marginals
                    .entry((ex.context.id, s as u8))
                    .or_default()
                    .entry(steps[s])
                    .or_default() += w;
            }
        }
    }
    for ((ctx, step, prefix), counts) in rows {
        chain.insert_row(
            RowKey { ctx, step, prefix },
            smoothed_row(&counts, cfg.alpha, bins),
        );
    }
    for ((ctx, step), counts) in marginals {
        chain.insert_marginal(ctx, step, smoothed_row(&counts, cfg.alpha, bins));
    }
    Ok(chain)
}

/// Smallest standard deviation of the Gaussian baseline, in bin widths.
const GAUSSIAN_SIGMA_FLOOR_BINS: f64 = 0.5;

/// Per-context mean and variance of the normalized canonical parameters.
/// Contexts without data get the pooled statistics.
pub fn fit_gaussian(data: &[TrainingExample], quantizer: &Quantizer, context_vocab: Option<u32>) -> Result<GaussianBaseline> {
    let codec = shared_codec(data, quantizer)?;
    let vocab = vocab_for(data, context_vocab)?;
    let vectors: Vec<(u32, [f64; NUM_PARAMS])> = data
        .iter()
        .map(|e| (e.context.id, codec.normalizer.normalize_box(&e.gt.canonical(codec.symmetry))))
        .collect();
    let stats = |sel: &mut dyn Iterator<Item = &[f64; NUM_PARAMS]>| -> Option<GaussianRow> {
        let xs: Vec<&[f64; NUM_PARAMS]> = sel.collect();
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mut mean = [0.0; NUM_PARAMS];
        let mut log_var = [0.0; NUM_PARAMS];
        for i in 0..NUM_PARAMS {
            mean[i] = xs.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / n;
            let floor = GAUSSIAN_SIGMA_FLOOR_BINS * quantizer.bin_width(i);
            log_var[i] = var.max(floor * floor).ln();
        }
        Some(GaussianRow { mean, log_var })
    };
    let pooled = stats(&mut vectors.iter().map(|(_, v)| v)).expect("non-empty data");
    let rows = (0..vocab)
        .map(|c| {
            stats(&mut vectors.iter().filter(|(id, _)| *id == c).map(|(_, v)| v)).unwrap_or_else(|| pooled.clone())
        })
        .collect();
    GaussianBaseline::new(codec, rows)
}

/// Mean over examples of `-sum_B w log p(target)`.
pub fn evaluate_nll<D: BoxDistribution + ?Sized>(model: &D, data: &[TrainingExample], averaging: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let q = &model.codec().quantizer;
    let mut total = 0.0;
    for ex in data {
        for (qb, w) in build_targets(ex, q, averaging) {
            total -= w * log_prob(model, &qb, &ex.context)?;
        }
    }
    Ok(total / data.len() as f64)
}

/// Monte-Carlo estimate of `E_b[1 - IoU(b', gt)]`, where `b'` replaces each
/// sampled bin by its conditional mean given the sampled prefix.
pub fn expected_iou_loss<D: BoxDistribution + ?Sized>(
    model: &D,
    ctx: &Context,
    gt: &BoxParams,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_samples {
        let qb = sample(model, ctx, rng)?;
        let refined = expectation_refine(model, &qb, ctx)?;
        total += 1.0 - iou(&refined, gt);
    }
    Ok(total / n_samples as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub dataset_size: usize,
    /// Weighted fraction of targets with at least one clamped parameter.
    pub overflow_rate: f64,
    pub nll: f64,
    /// Mean entropy (nats) of each step's conditional along the targets.
    pub step_entropy: [f64; NUM_PARAMS],
}

pub const FIT_REPORT_SCHEMA_VERSION: u32 = 1;

pub fn fit_report<D: BoxDistribution + ?Sized>(model: &D, data: &[TrainingExample], averaging: bool) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let q = &model.codec().quantizer;
    let order = model.param_order();
    let mut overflow = 0.0;
    let mut nll = 0.0;
    let mut entropy = [0.0; NUM_PARAMS];
    for ex in data {
        for (qb, w) in build_targets(ex, q, averaging) {
            if qb.any_overflow() {
                overflow += w;
            }
            nll -= w * log_prob(model, &qb, &ex.context)?;
            let steps = order.to_steps(&qb);
            for s in 0..NUM_PARAMS {
                let row = model.conditional(&ex.context, &steps[..s])?;
                let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                entropy[s] += w * h;
            }
        }
    }
    let n = data.len() as f64;
    Ok(FitReport {
        schema_version: FIT_REPORT_SCHEMA_VERSION,
        dataset_size: data.len(),
        overflow_rate: overflow / n,
        nll: nll / n,
        step_entropy: entropy.map(|h| h / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{beam_search, BeamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(gt: BoxParams, ctx: u32, symmetry: SymmetryMode) -> TrainingExample {
        TrainingExample {
            context: Context::new(ctx),
            gt,
            normalizer: Normalizer::fixed([2.0; 3], [0.0; 3]).unwrap(),
            symmetry,
        }
    }

    fn generic() -> BoxParams {
        BoxParams::new([0.3, 0.5, 0.7], [0.1, -0.2, 0.3], [0.4, 0.2, -0.3])
    }

    #[test]
    fn weight_unit_divisible_by_all_set_sizes() {
        assert!((1..=24).all(|n| WEIGHT_UNIT % n == 0));
    }

    #[test]
    fn target_counts_per_mode() {
        let q = Quantizer::default();
        let t = build_targets(&example(generic(), 0, SymmetryMode::None), &q, true);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].1, 1.0);
        let t = build_targets(&example(generic(), 0, SymmetryMode::FullSo3), &q, true);
        assert_eq!(t.len(), 24);
        assert!(t.iter().all(|(_, w)| *w == 1.0 / 24.0));
        let yaw = BoxParams::with_yaw([0.3, 0.5, 0.7], [0.1, -0.2, 0.3], 0.4);
        let t = build_targets(&example(yaw, 0, SymmetryMode::Yaw), &q, true);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|(_, w)| *w == 0.25));
        assert_eq!(build_targets(&example(yaw, 0, SymmetryMode::Yaw), &q, false).len(), 1);
    }

    #[test]
    fn point_mass_fit_decodes_its_box() {
        let b = BoxParams::with_yaw([0.3, 0.5, 0.7], [0.1, -0.2, 0.3], 0.4);
        let data = vec![example(b, 0, SymmetryMode::None); 10];
        let cfg = FitConfig {
            alpha: 1e-3,
            ..FitConfig::default()
        };
        let chain = fit_tabular(&data, &cfg).unwrap();
        let (qb, _) = beam_search(&chain, &Context::new(0), &BeamConfig::default()).unwrap();
        assert_eq!(qb.indices, build_targets(&data[0], &cfg.quantizer, false)[0].0.indices);
        let nll = evaluate_nll(&chain, &data, false).unwrap();
        let per_step = (10.0 + 1e-3) / (10.0 + 1e-3 * 512.0);
        assert!((nll + 9.0 * f64::ln(per_step)).abs() < 1e-9, "nll {nll}");
    }

    #[test]
    fn two_heights_split_evenly() {
        let short = BoxParams::axis_aligned([0.5, 0.5, 0.4], [0.0; 3]);
        let tall = BoxParams::axis_aligned([0.5, 0.5, 0.8], [0.0; 3]);
        let data = vec![example(short, 0, SymmetryMode::None), example(tall, 0, SymmetryMode::None)];
        let alpha = 1e-9;
        let cfg = FitConfig {
            alpha,
            prefix_buckets: 256,
            symmetry_averaging: false,
            ..FitConfig::default()
        };
        let chain = fit_tabular(&data, &cfg).unwrap();
        let steps = cfg.param_order.to_steps(&build_targets(&data[0], &cfg.quantizer, false)[0].0);
        let row = chain.conditional(&Context::new(0), &steps[..2]).unwrap();
        let hs = build_targets(&data[0], &cfg.quantizer, false)[0].0.indices[2];
        let ht = build_targets(&data[1], &cfg.quantizer, false)[0].0.indices[2];
        assert_ne!(hs, ht);
        assert!((row[hs as usize] - 0.5).abs() < 1e-6);
        assert!((row[ht as usize] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn yaw_symmetric_targets_get_equal_mass() {
        let b = BoxParams::with_yaw([0.5, 0.5, 0.4], [0.0; 3], 0.3);
        let data = vec![example(b, 0, SymmetryMode::Yaw); 3];
        let cfg = FitConfig {
            alpha: 1e-3,
            prefix_buckets: 64,
            ..FitConfig::default()
        };
        let chain = fit_tabular(&data, &cfg).unwrap();
        let lps: Vec<f64> = build_targets(&data[0], &cfg.quantizer, true)
            .iter()
            .map(|(qb, _)| log_prob(&chain, qb, &Context::new(0)).unwrap())
            .collect();
        for lp in &lps {
            assert!((lp - lps[0]).abs() < 1e-9, "{lps:?}");
        }
    }

    #[test]
    fn smoothing_floor_holds() {
        let data = vec![example(generic(), 0, SymmetryMode::None); 5];
        let cfg = FitConfig::default();
        let chain = fit_tabular(&data, &cfg).unwrap();
        let row = chain.conditional(&Context::new(0), &[]).unwrap();
        let floor = cfg.alpha / (5.0 + cfg.alpha * 512.0);
        assert!(row.iter().all(|&p| p >= floor * (1.0 - 1e-12)));
    }

    #[test]
    fn rejects_empty_data_and_bad_alpha() {
        assert!(matches!(fit_tabular(&[], &FitConfig::default()), Err(Error::EmptyDataset)));
        let data = vec![example(generic(), 0, SymmetryMode::None)];
        let cfg = FitConfig {
            alpha: 0.0,
            ..FitConfig::default()
        };
        assert!(fit_tabular(&data, &cfg).is_err());
    }

    #[test]
    fn uniform_two_bin_nll() {
        let codec = BoxCodec::new(Normalizer::fixed([2.0; 3], [0.0; 3]).unwrap(), Quantizer::with_bins(2), SymmetryMode::None);
        let chain = TabularChain::uniform(codec, ParamOrder::default(), 1);
        let data = vec![example(generic(), 0, SymmetryMode::None)];
        let nll = evaluate_nll(&chain, &data, false).unwrap();
        assert!((nll - 9.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn expected_iou_loss_extremes() {
        let raw = BoxParams::axis_aligned([0.5, 0.5, 0.5], [0.1, 0.1, 0.1]);
        let ex = example(raw, 0, SymmetryMode::None);
        let codec = BoxCodec::new(ex.normalizer, Quantizer::default(), SymmetryMode::None);
        let target = codec.quantize(&raw);
        let gt = codec.dequantize(&target).unwrap();
        let chain = TabularChain::point_mass(codec.clone(), ParamOrder::default(), 1, &target);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = expected_iou_loss(&chain, &Context::new(0), &gt, 4, &mut rng).unwrap();
        assert!(loss <= 0.01, "loss {loss}");
        let far = BoxParams::axis_aligned([0.5, 0.5, 0.5], [1.5, 1.5, 1.5]);
        let far_chain = TabularChain::point_mass(codec.clone(), ParamOrder::default(), 1, &codec.quantize(&far));
        let loss = expected_iou_loss(&far_chain, &Context::new(0), &gt, 4, &mut rng).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn gaussian_fit_matches_moments() {
        let a = BoxParams::axis_aligned([0.4, 0.5, 0.6], [0.0; 3]);
        let b = BoxParams::axis_aligned([0.6, 0.5, 0.6], [0.0; 3]);
        let data = vec![example(a, 0, SymmetryMode::None), example(b, 0, SymmetryMode::None)];
        let g = fit_gaussian(&data, &Quantizer::default(), Some(2)).unwrap();
        let (mu, sigma) = g.dim_stats(&Context::new(0)).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-12);
        assert!((sigma[0] - 0.1).abs() < 1e-12);
        assert_eq!(g.rows()[1], g.rows()[0]);
    }
}
