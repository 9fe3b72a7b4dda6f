use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::box_core::{QuantizedBox, NUM_PARAMS};
use crate::dist::{BoxDistribution, Context};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_width: 32 }
    }
}

impl BeamConfig {
    pub fn new(beam_width: usize) -> Self {
        Self { beam_width }
    }
}

struct Candidate {
    score: f64,
    parent: usize,
    bin: u32,
}

/// Approximate mode of the chain.
///
/// Keeps the `beam_width` best prefixes by cumulative log-probability at
/// every step. Ties are broken towards the lexicographically smallest bin
/// sequence. The returned score is the log-probability of the returned
/// tuple.
pub fn beam_search<D: BoxDistribution + ?Sized>(
    d: &D,
    ctx: &Context,
    cfg: &BeamConfig,
) -> Result<(QuantizedBox, f64)> {
    d.check_context(ctx)?;
    let bins = d.bins() as usize;
    if cfg.beam_width == 0 || cfg.beam_width > bins {
        return Err(Error::InvalidConfig(format!(
            "beam width {} must be in 1..={bins}",
            cfg.beam_width
        )));
    }
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::with_capacity(NUM_PARAMS), 0.0)];
    for _ in 0..NUM_PARAMS {
        let mut cands = Vec::with_capacity(beams.len() * bins);
        for (parent, (prefix, score)) in beams.iter().enumerate() {
            let row = d.conditional(ctx, prefix)?;
            for (bin, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    cands.push(Candidate {
                        score: score + p.ln(),
                        parent,
                        bin: bin as u32,
                    });
                }
            }
        }
        if cands.is_empty() {
            return Err(Error::InvalidDistribution("every continuation has zero mass".into()));
        }
        let cmp = |a: &Candidate, b: &Candidate| -> Ordering {
            b.score
                .total_cmp(&a.score)
                .then_with(|| beams[a.parent].0.cmp(&beams[b.parent].0))
                .then(a.bin.cmp(&b.bin))
        };
        let keep = cfg.beam_width.min(cands.len());
        if keep < cands.len() {
            cands.select_nth_unstable_by(keep - 1, cmp);
            cands.truncate(keep);
        }
        cands.sort_by(cmp);
        beams = cands
            .iter()
            .map(|c| {
                let mut p = beams[c.parent].0.clone();
                p.push(c.bin);
                (p, c.score)
            })
            .collect();
    }
    let (steps, score) = beams.swap_remove(0);
    let steps: [u32; NUM_PARAMS] = steps.try_into().expect("nine steps");
    Ok((d.param_order().from_steps(&steps), score))
}
