//! Distribution of normalized centre offsets between proposals and their
//! assigned ground truths, per stage.

use crate::assignment::box_delta;
use crate::bbox::Bbox;
use crate::detector::Model;
use crate::error::Result;

use super::Scene;

pub const BIN_WIDTH: f64 = 0.05;
/// Bins per axis covering `[-1, 1]`.
pub const BINS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaHistogram {
    /// `counts[iy * BINS + ix]`.
    pub counts: Vec<u64>,
    pub matched: usize,
    /// Proposals with no assigned ground truth.
    pub unmatched: usize,
    /// Matched deltas outside `[-1, 1]` on either axis; excluded from `counts`.
    pub out_of_range: usize,
    pub mean_abs_dx: f64,
    pub mean_abs_dy: f64,
}

impl DeltaHistogram {
    /// Mean of `|dx|` and `|dy|`.
    pub fn mean_abs(&self) -> f64 {
        0.5 * (self.mean_abs_dx + self.mean_abs_dy)
    }

    pub fn count_at(&self, ix: usize, iy: usize) -> u64 {
        self.counts[iy * BINS + ix]
    }
}

/// Bin of `d`, or `None` outside `[-1, 1]`. A value on an edge belongs to
/// the bin above it (the last bin also takes `1.0`); positions within
/// rounding of an edge count as on it.
pub fn bin_of(d: f64) -> Option<usize> {
    if !(-1.0..=1.0).contains(&d) {
        return None;
    }
    let pos = (d + 1.0) / BIN_WIDTH;
    let snapped = if (pos - pos.round()).abs() < 1e-9 { pos.round() } else { pos.floor() };
    Some((snapped as usize).min(BINS - 1))
}

/// Histogram of `(proposal, assigned gt)` pairs; `None` marks an unmatched proposal.
pub fn histogram(pairs: &[(Bbox, Option<Bbox>)]) -> Result<DeltaHistogram> {
    let mut h = DeltaHistogram {
        counts: vec![0; BINS * BINS],
        matched: 0,
        unmatched: 0,
        out_of_range: 0,
        mean_abs_dx: 0.0,
        mean_abs_dy: 0.0,
    };
    for (p, g) in pairs {
        let Some(g) = g else {
            h.unmatched += 1;
            continue;
        };
        let (dx, dy) = box_delta(g, p)?;
        h.matched += 1;
        h.mean_abs_dx += dx.abs();
        h.mean_abs_dy += dy.abs();
        match (bin_of(dx), bin_of(dy)) {
            (Some(ix), Some(iy)) => h.counts[iy * BINS + ix] += 1,
            _ => h.out_of_range += 1,
        }
    }
    if h.matched > 0 {
        h.mean_abs_dx /= h.matched as f64;
        h.mean_abs_dy /= h.matched as f64;
    }
    Ok(h)
}

/// One histogram per stage, built from the boxes entering each stage and the
/// assignment that stage receives in the loss.
pub fn delta_distribution(model: &Model, scenes: &[Scene]) -> Result<Vec<DeltaHistogram>> {
    let mut per_stage: Vec<Vec<(Bbox, Option<Bbox>)>> = vec![Vec::new(); model.config.n_stages];
    for s in scenes {
        for (i, m) in model.stage_matches(&s.image, &s.annotation)?.into_iter().enumerate() {
            per_stage[i].extend(m.inputs.iter().zip(&m.sigma).map(|(b, g)| (*b, g.map(|g| s.annotation.boxes[g]))));
        }
    }
    per_stage.iter().map(|p| histogram(p)).collect()
}

/// Summary rows then non-empty bins, identified by their lower edges.
pub fn to_csv(stages: &[DeltaHistogram]) -> String {
    let mut s = String::from("stage,matched,unmatched,out_of_range,mean_abs_dx,mean_abs_dy\n");
    for (i, h) in stages.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            h.matched,
            h.unmatched,
            h.out_of_range,
            h.mean_abs_dx,
            h.mean_abs_dy
        ));
    }
    s.push_str("\nstage,dx_lo,dy_lo,count\n");
    for (i, h) in stages.iter().enumerate() {
        for iy in 0..BINS {
            for ix in 0..BINS {
                let c = h.count_at(ix, iy);
                if c > 0 {
                    let lo = |k: usize| -1.0 + k as f64 * BIN_WIDTH;
                    s.push_str(&format!("{},{:.2},{:.2},{c}\n", i + 1, lo(ix), lo(iy)));
                }
            }
        }
    }
    s
}
