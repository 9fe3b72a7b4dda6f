//! Evaluation quantities: overlap aggregates, F1, dimension, rotation and
//! center errors, containment curves and uncertainty quality.

use serde::{Deserialize, Serialize};

use crate::box_core::{symmetry_group, BoxParams, Quaternion, SymmetryMode};
use crate::dist::{Context, GaussianBaseline};
use crate::error::{Error, Result};
use crate::geometry::{iog, iou};

/// IoG above which a prediction counts as containing the ground truth.
pub const CONTAINMENT_IOG: f64 = 0.95;

/// IoU below which a prediction counts as a failure for uncertainty AUC.
pub const LOW_IOU_THRESHOLD: f64 = 0.25;

/// Harmonic mean of IoU and IoG; 0 when both are 0.
pub fn f1(iou: f64, iog: f64) -> f64 {
    if iou + iog == 0.0 {
        0.0
    } else {
        2.0 * iou * iog / (iou + iog)
    }
}

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// `min_sigma sum_i |d_sigma(i) - gt_i|`.
pub fn err_dim(d: [f64; 3], gt: [f64; 3]) -> f64 {
    PERMUTATIONS
        .iter()
        .map(|p| (0..3).map(|i| (d[p[i]] - gt[i]).abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Rotation angle between `q` and `gt`, minimized over the relabelings of
/// the ground-truth box allowed by `mode`.
pub fn err_quat(q: &Quaternion, gt: &Quaternion, mode: SymmetryMode) -> f64 {
    let r = gt.to_unit().to_rotation_matrix();
    symmetry_group(mode)
        .iter()
        .map(|g| {
            let alt = Quaternion::from_matrix(&(r.matrix() * g));
            2.0 * q.dot(&alt).abs().clamp(0.0, 1.0).acos()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn err_center(c: [f64; 3], gt: [f64; 3]) -> f64 {
    (0..3).map(|i| (c[i] - gt[i]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub method: String,
    pub pred: BoxParams,
    pub gt: BoxParams,
    pub symmetry: SymmetryMode,
    #[serde(default)]
    pub score: Option<f64>,
}

/// One per-object CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub method: String,
    pub iou: f64,
    pub iog: f64,
    pub f1: f64,
    pub err_dim: f64,
    pub err_quat: f64,
    pub err_center: f64,
    pub score: Option<f64>,
}

pub fn evaluate_pair(p: &EvalPair) -> PairMetrics {
    let v_iou = iou(&p.pred, &p.gt);
    let v_iog = iog(&p.pred, &p.gt);
    PairMetrics {
        id: p.id.clone(),
        method: p.method.clone(),
        iou: v_iou,
        iog: v_iog,
        f1: f1(v_iou, v_iog),
        err_dim: err_dim(p.pred.dims, p.gt.dims),
        err_quat: err_quat(&p.pred.quaternion(), &p.gt.quaternion(), p.symmetry),
        err_center: err_center(p.pred.center, p.gt.center),
        score: p.score,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyQuality {
    /// Absent when only one class is present.
    pub roc_auc: Option<f64>,
    /// Absent when either variable is constant.
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub count: usize,
    pub mean_iou: f64,
    pub mean_iog: f64,
    /// F1 of the mean IoU and mean IoG.
    pub f1: f64,
    pub err_dim: f64,
    pub err_quat: f64,
    pub err_center: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyQuality>,
}

/// Aggregates rows of one method. Uncertainty quality is computed when
/// every row carries a score.
pub fn summarize(method: &str, rows: &[PairMetrics]) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&PairMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_iou = mean(|r| r.iou);
    let mean_iog = mean(|r| r.iog);
    let uncertainty = rows
        .iter()
        .map(|r| r.score)
        .collect::<Option<Vec<f64>>>()
        .map(|scores| {
            let ious: Vec<f64> = rows.iter().map(|r| r.iou).collect();
            uncertainty_quality(&scores, &ious, LOW_IOU_THRESHOLD)
        });
    Ok(MetricsReport {
        method: method.to_string(),
        count: rows.len(),
        mean_iou,
        mean_iog,
        f1: f1(mean_iou, mean_iog),
        err_dim: mean(|r| r.err_dim),
        err_quat: mean(|r| r.err_quat),
        err_center: mean(|r| r.err_center),
        uncertainty,
    })
}

/// Fraction of `(pred, gt)` pairs whose IoG exceeds [`CONTAINMENT_IOG`],
/// for each quantile group.
pub fn containment_curve(groups: &[(f64, Vec<(BoxParams, BoxParams)>)]) -> Result<Vec<(f64, f64)>> {
    groups
        .iter()
        .map(|(q, pairs)| {
            if pairs.is_empty() {
                return Err(Error::InvalidConfig(format!("no pairs for quantile {q}")));
            }
            let hits = pairs.iter().filter(|(p, g)| iog(p, g) > CONTAINMENT_IOG).count();
            Ok((*q, hits as f64 / pairs.len() as f64))
        })
        .collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney form).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// AUC of `scores` for predicting `iou < threshold`, and the rank
/// correlation between `scores` and IoU.
pub fn uncertainty_quality(scores: &[f64], ious: &[f64], threshold: f64) -> UncertaintyQuality {
    let labels: Vec<bool> = ious.iter().map(|&v| v < threshold).collect();
    UncertaintyQuality {
        roc_auc: roc_auc(scores, &labels),
        spearman: spearman(scores, ious),
    }
}

/// `prod sigma / prod mu` over the three dimensions.
pub fn dims_spread(mu: [f64; 3], sigma: [f64; 3]) -> Result<f64> {
    if mu.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::InvalidDistribution(format!("non-positive mean dimension {mu:?}")));
    }
    Ok(sigma.iter().product::<f64>() / mu.iter().product::<f64>())
}

/// Dimension-spread uncertainty of the Gaussian baseline for a context.
pub fn gaussian_uncertainty(g: &GaussianBaseline, ctx: &Context) -> Result<f64> {
    let (mu, sigma) = g.dim_stats(ctx)?;
    dims_spread(mu, sigma)
}
