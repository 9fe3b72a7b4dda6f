//! Occupancy estimates and quantile boxes.
//!
//! Occupancy `O(x)` is the fraction of sampled boxes containing `x`. The
//! occupancy quantile `Q(q)` keeps sample points with `O(x) > q`, and the
//! quantile box is the smallest box around `Q(q)` among the rotations of
//! the sampled boxes.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::box_core::{euler_zyx_from_matrix, BoxParams};
use crate::dist::{BoxDistribution, Context};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxFrame};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    pub q: f64,
    /// Number of sampled boxes.
    pub k: usize,
    /// Interior points sampled per box.
    pub m: usize,
    pub seed: u64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            k: 64,
            m: 64,
            seed: 0,
        }
    }
}

impl QuantileConfig {
    pub fn with_q(q: f64) -> Self {
        Self { q, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidConfig(format!("quantile {} outside (0, 1)", self.q)));
        }
        if self.k < 2 || self.m < 1 {
            return Err(Error::InvalidConfig(format!(
                "need k >= 2 and m >= 1, got k = {}, m = {}",
                self.k, self.m
            )));
        }
        Ok(())
    }
}

/// `O(x)` for every point over the given boxes.
pub fn estimate_occupancy(points: &[[f64; 3]], boxes: &[BoxParams]) -> Vec<f64> {
    let frames: Vec<BoxFrame> = boxes.iter().map(BoxFrame::new).collect();
    let pts: Vec<V3> = points.iter().map(|p| V3::from(*p)).collect();
    occupancy_of(&pts, &frames)
}

fn occupancy_of(points: &[V3], frames: &[BoxFrame]) -> Vec<f64> {
    let k = frames.len() as f64;
    points
        .iter()
        .map(|x| frames.iter().filter(|f| f.contains(x)).count() as f64 / k)
        .collect()
}

/// Appends the 8 corners of `b` and `m` interior points.
///
/// Interior points are jittered on an `s x s x s` grid when `m = s^3`, and
/// uniform otherwise. Corners are included so that the bounding box of a
/// point subset can reach the faces of the boxes it came from.
pub fn sample_points_in_box(b: &BoxParams, m: usize, rng: &mut dyn RngCore, out: &mut Vec<V3>) {
    out.extend(b.corners());
    let r = b.rotation();
    let c = b.center_vec();
    let d = V3::from(b.dims);
    let mut push = |u: V3| out.push(c + r * (u - V3::repeat(0.5)).component_mul(&d));
    let s = (m as f64).cbrt().round() as usize;
    if s * s * s == m {
        let inv = 1.0 / s as f64;
        for i in 0..s {
            for j in 0..s {
                for l in 0..s {
                    let u = V3::new(
                        (i as f64 + rng.random::<f64>()) * inv,
                        (j as f64 + rng.random::<f64>()) * inv,
                        (l as f64 + rng.random::<f64>()) * inv,
                    );
                    push(u);
                }
            }
        }
    } else {
        for _ in 0..m {
            push(V3::new(rng.random(), rng.random(), rng.random()));
        }
    }
}

/// Sampled boxes with an occupancy-tagged point cloud, shared by every
/// quantile computed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancySample {
    pub boxes: Vec<BoxParams>,
    pub points: Vec<V3>,
    pub occupancy: Vec<f64>,
}

impl OccupancySample {
    pub fn max_occupancy(&self) -> f64 {
        self.occupancy.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn sample_occupancy<D: BoxDistribution + ?Sized>(
    d: &D,
    ctx: &Context,
    k: usize,
    m: usize,
    rng: &mut dyn RngCore,
) -> Result<OccupancySample> {
    let boxes = (0..k)
        .map(|_| d.sample_box(ctx, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(k * (m + 8));
    for b in &boxes {
        sample_points_in_box(b, m, rng, &mut points);
    }
    let frames: Vec<BoxFrame> = boxes.iter().map(BoxFrame::new).collect();
    let occupancy = occupancy_of(&points, &frames);
    Ok(OccupancySample {
        boxes,
        points,
        occupancy,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileResult {
    pub q: f64,
    pub sample: Arc<OccupancySample>,
    /// Indices into `sample.points` of the occupancy quantile `Q(q)`.
    pub members: Vec<usize>,
    pub quantile_box: BoxParams,
    /// Index of the sampled box whose rotation was chosen.
    pub rotation_index: usize,
}

impl QuantileResult {
    pub fn member_points(&self) -> impl Iterator<Item = &V3> {
        self.members.iter().map(|&i| &self.sample.points[i])
    }
}

/// Quantile box of a prepared sample.
pub fn quantile_box_from_sample(sample: Arc<OccupancySample>, q: f64) -> Result<QuantileResult> {
    let members: Vec<usize> = (0..sample.points.len())
        .filter(|&i| sample.occupancy[i] > q)
        .collect();
    if members.is_empty() {
        return Err(Error::QuantileTooHigh {
            q,
            max_occupancy: sample.max_occupancy(),
        });
    }
    let pts: Vec<V3> = members.iter().map(|&i| sample.points[i]).collect();

    let mut best: Option<(f64, usize, Matrix3<f64>, V3, V3)> = None;
    let mut tried: Vec<[u64; 3]> = Vec::new();
    for (i, b) in sample.boxes.iter().enumerate() {
        let key = b.euler_zyx.map(f64::to_bits);
        if tried.contains(&key) {
            continue;
        }
        tried.push(key);
        let rot = *b.rotation().matrix();
        let rt = rot.transpose();
        let mut lo = V3::repeat(f64::INFINITY);
        let mut hi = V3::repeat(f64::NEG_INFINITY);
        for p in &pts {
            let l = rt * p;
            lo = lo.inf(&l);
            hi = hi.sup(&l);
        }
        let vol = (hi - lo).product();
        if best.as_ref().is_none_or(|(v, ..)| vol < *v) {
            best = Some((vol, i, rot, lo, hi));
        }
    }
    let (_, rotation_index, rot, lo, hi) = best.expect("at least one sampled box");
    let dims = hi - lo;
    let center = rot * (lo + dims * 0.5);
    let quantile_box = BoxParams::new(dims.into(), center.into(), euler_zyx_from_matrix(&rot));
    Ok(QuantileResult {
        q,
        sample,
        members,
        quantile_box,
        rotation_index,
    })
}

/// Quantile box with `k` sampled boxes and `m` interior points per box.
pub fn quantile_box<D: BoxDistribution + ?Sized>(
    d: &D,
    ctx: &Context,
    cfg: &QuantileConfig,
) -> Result<QuantileResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample = sample_occupancy(d, ctx, cfg.k, cfg.m, &mut rng)?;
    quantile_box_from_sample(Arc::new(sample), cfg.q)
}

/// `1 - IoU(b_alpha, b_beta)` with both quantile boxes taken from one
/// shared sample.
pub fn uncertainty_measure<D: BoxDistribution + ?Sized>(
    d: &D,
    ctx: &Context,
    alpha: f64,
    beta: f64,
    cfg: &QuantileConfig,
) -> Result<f64> {
    if !(0.0 < alpha && alpha < beta && beta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < alpha < beta < 1, got {alpha}, {beta}"
        )));
    }
    QuantileConfig { q: alpha, ..*cfg }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample = Arc::new(sample_occupancy(d, ctx, cfg.k, cfg.m, &mut rng)?);
    Ok(uncertainty_from_sample(&sample, alpha, beta)?)
}

pub fn uncertainty_from_sample(sample: &Arc<OccupancySample>, alpha: f64, beta: f64) -> Result<f64> {
    let a = quantile_box_from_sample(sample.clone(), alpha)?;
    let b = quantile_box_from_sample(sample.clone(), beta)?;
    Ok(1.0 - iou(&a.quantile_box, &b.quantile_box))
}
