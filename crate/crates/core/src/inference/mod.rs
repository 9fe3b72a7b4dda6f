//! Decoding: beam search, quantile boxes, uncertainty, and prediction with
//! known SKU dimensions.

mod beam;
mod quantile;

pub use beam::{beam_search, BeamConfig};
pub use quantile::{
    estimate_occupancy, quantile_box, quantile_box_from_sample, sample_occupancy, sample_points_in_box,
    uncertainty_from_sample, uncertainty_measure, OccupancySample, QuantileConfig, QuantileResult,
};

use crate::box_core::QuantizedBox;
use crate::dist::{condition_on_dims, log_prob, BoxDistribution, Context};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionedPrediction {
    pub qb: QuantizedBox,
    pub sku_index: usize,
    /// Joint log-probability of the full tuple under the unconditioned model.
    pub score: f64,
}

/// Beam search conditioned on each candidate SKU's dimensions; returns the
/// candidate whose decoded tuple scores highest (lowest index on ties).
pub fn dimension_conditioned_predict<D: BoxDistribution + ?Sized>(
    d: &D,
    ctx: &Context,
    sku_dims: &[[f64; 3]],
    cfg: &BeamConfig,
) -> Result<ConditionedPrediction> {
    if sku_dims.is_empty() {
        return Err(Error::InvalidConfig("no SKU candidates".into()));
    }
    let mut best: Option<ConditionedPrediction> = None;
    for (i, dims) in sku_dims.iter().enumerate() {
        let (bins, overflow) = d.codec().quantize_dims(*dims);
        let cond = condition_on_dims(d, bins, ctx)?;
        let (mut qb, _) = beam_search(&cond, ctx, cfg)?;
        qb.overflow[..3].copy_from_slice(&overflow);
        let score = log_prob(d, &qb, ctx)?;
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(ConditionedPrediction {
                qb,
                sku_index: i,
                score,
            });
        }
    }
    Ok(best.expect("non-empty SKU list"))
}
