//! Matching and losses: bipartite assignment, GIoU, focal loss, the
//! objectness-and-IoU matching quality for dense locations, and the set
//! losses for both the query generator and the decoder stages.

mod hungarian;
mod losses;

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::error::{Error, Result};

pub use hungarian::{brute_force_min, hungarian, Assignment};
pub use losses::{
    giou_graph, qgn_assign, qgn_loss, rcnn_set_loss, stage_set_loss, QgnAssignment, QgnLoss, RcnnLoss,
    StagePrediction,
};

/// Ground truth for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub boxes: Vec<Bbox>,
    pub labels: Vec<usize>,
}

impl SceneAnnotation {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, width: f64, height: f64, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Dataset(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width && b.y2 <= height;
            if !(b.x1 < b.x2 && b.y1 < b.y2 && inside) {
                return Err(Error::Dataset(format!("box {b:?} is degenerate or outside {width}×{height}")));
            }
            if l >= num_classes {
                return Err(Error::Dataset(format!("label {l} out of range for {num_classes} classes")));
            }
        }
        Ok(())
    }
}

/// Focal loss shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Exponent split between objectness and IoU in the dense matching quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchQualityParams {
    pub alpha: f64,
}

impl Default for MatchQualityParams {
    fn default() -> Self {
        Self { alpha: 0.8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RcnnWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for RcnnWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_obj: f64,
    pub lambda_giou: f64,
    pub rcnn: RcnnWeights,
    pub focal: FocalParams,
    pub matching: MatchQualityParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_obj: 1.0,
            lambda_giou: 2.0,
            rcnn: RcnnWeights::default(),
            focal: FocalParams::default(),
            matching: MatchQualityParams::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            ("lambda_obj", self.lambda_obj),
            ("lambda_giou", self.lambda_giou),
            ("rcnn.lambda_cls", self.rcnn.lambda_cls),
            ("rcnn.lambda_l1", self.rcnn.lambda_l1),
            ("rcnn.lambda_giou", self.rcnn.lambda_giou),
            ("focal.gamma", self.focal.gamma),
        ];
        if let Some((name, v)) = w.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
        }
        for (name, v) in [("focal.alpha", self.focal.alpha), ("matching.alpha", self.matching.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Generalized IoU in `[-1, 1]`. Degenerate enclosures fall back to IoU.
pub fn giou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let enc = a.enclosure(b).area();
    if enc > 0.0 {
        iou - (enc - union) / enc
    } else {
        iou
    }
}

/// Probabilities are clamped into this range before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Focal loss of a probability against a binary target.
pub fn focal_loss(p: f64, is_positive: bool, params: FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if is_positive {
        -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
    } else {
        -(1.0 - params.alpha) * p.powf(params.gamma) * (1.0 - p).ln()
    }
}

/// `q_obj^(1-α) · q_iou^α`, with `0^0 = 1`.
pub fn match_quality(q_obj: f64, q_iou: f64, params: MatchQualityParams) -> f64 {
    q_obj.powf(1.0 - params.alpha) * q_iou.powf(params.alpha)
}

/// Centre offset of `gt` from `proposal`, normalized by the proposal size.
pub fn box_delta(gt: &Bbox, proposal: &Bbox) -> Result<(f64, f64)> {
    let (w, h) = (proposal.width(), proposal.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Assignment(format!("degenerate proposal {proposal:?}")));
    }
    let (gx, gy) = gt.center();
    let (bx, by) = proposal.center();
    Ok(((gx - bx) / w, (gy - by) / h))
}
