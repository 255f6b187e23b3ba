//! Assignments and losses built on the graph. Matching is computed on values
//! and held constant for the step; only the losses are differentiated.

use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::ndgrad::{sigmoid, Array, Graph, Var};

use super::{focal_loss, giou, hungarian, match_quality, Assignment, LossWeights, MatchQualityParams, SceneAnnotation};

/// Cost standing in for "not a candidate"; dominates any sum of real costs.
const FORBIDDEN: f64 = 1e6;
/// Added to GIoU denominators so degenerate boxes stay finite.
const AREA_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QgnAssignment {
    /// Rows are dense locations, columns ground-truth boxes.
    pub assignment: Assignment,
    /// Ground truths left without a positive location.
    pub unassigned_gt: usize,
}

/// Matches dense locations to ground truths by maximal matching quality,
/// considering only locations whose centre lies inside the box.
pub fn qgn_assign(
    probs: &[f64],
    boxes: &[Bbox],
    centers: &[(f64, f64)],
    gt: &SceneAnnotation,
    params: MatchQualityParams,
) -> Result<QgnAssignment> {
    let n = probs.len();
    if boxes.len() != n || centers.len() != n {
        return Err(Error::Assignment(format!(
            "{n} scores, {} boxes, {} centres",
            boxes.len(),
            centers.len()
        )));
    }
    let candidate = |i: usize, g: &Bbox| g.contains_point(centers[i].0, centers[i].1);
    let active: Vec<usize> = (0..gt.len())
        .filter(|&j| (0..n).any(|i| candidate(i, &gt.boxes[j])))
        .collect();
    let mut unassigned = gt.len() - active.len();
    if active.is_empty() || n == 0 {
        return Ok(QgnAssignment {
            assignment: Assignment::empty(n),
            unassigned_gt: gt.len(),
        });
    }
    let m = active.len();
    let mut cost = vec![FORBIDDEN; n * m];
    for i in 0..n {
        for (c, &j) in active.iter().enumerate() {
            let g = &gt.boxes[j];
            if candidate(i, g) {
                cost[i * m + c] = -match_quality(probs[i], boxes[i].iou(g), params);
            }
        }
    }
    let solved = hungarian(&cost, n, m)?;
    let mut sigma = vec![None; n];
    let mut total = 0.0;
    for (i, c) in solved.pairs() {
        if cost[i * m + c] < FORBIDDEN {
            sigma[i] = Some(active[c]);
            total += cost[i * m + c];
        } else {
            unassigned += 1;
        }
    }
    Ok(QgnAssignment {
        assignment: Assignment {
            sigma,
            total_cost: total,
        },
        unassigned_gt: unassigned,
    })
}

/// Generalized IoU between rows of `pred` (`[P, 4]`, `x1 y1 x2 y2`) and the
/// matching ground truths; returns `[P, 1]`.
pub fn giou_graph(g: &mut Graph, pred: Var, gt: &[Bbox]) -> Result<Var> {
    let p = gt.len();
    let col = |g: &mut Graph, i: usize| g.narrow(pred, 1, i, 1);
    let (px1, py1, px2, py2) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let mut gcol = |f: fn(&Bbox) -> f64| g.constant(Array::from_parts(vec![p, 1], gt.iter().map(f).collect()));
    let gx1 = gcol(|b| b.x1);
    let gy1 = gcol(|b| b.y1);
    let gx2 = gcol(|b| b.x2);
    let gy2 = gcol(|b| b.y2);
    let g_area = g.constant(Array::from_parts(vec![p, 1], gt.iter().map(Bbox::area).collect()));

    let iw = {
        let hi = g.minimum(px2, gx2)?;
        let lo = g.maximum(px1, gx1)?;
        let d = g.sub(hi, lo)?;
        g.relu(d)?
    };
    let ih = {
        let hi = g.minimum(py2, gy2)?;
        let lo = g.maximum(py1, gy1)?;
        let d = g.sub(hi, lo)?;
        g.relu(d)?
    };
    let inter = g.mul(iw, ih)?;
    let pw = g.sub(px2, px1)?;
    let ph = g.sub(py2, py1)?;
    let p_area = g.mul(pw, ph)?;
    let sum_area = g.add(p_area, g_area)?;
    let union = g.sub(sum_area, inter)?;
    let union = g.add_scalar(union, AREA_EPS)?;
    let iou = g.div(inter, union)?;

    let ew = {
        let hi = g.maximum(px2, gx2)?;
        let lo = g.minimum(px1, gx1)?;
        g.sub(hi, lo)?
    };
    let eh = {
        let hi = g.maximum(py2, gy2)?;
        let lo = g.minimum(py1, gy1)?;
        g.sub(hi, lo)?
    };
    let enc = g.mul(ew, eh)?;
    let enc = g.add_scalar(enc, AREA_EPS)?;
    let slack = g.sub(enc, union)?;
    let penalty = g.div(slack, enc)?;
    Ok(g.sub(iou, penalty)?)
}

/// `Σ (1 - giou)` over rows.
fn giou_loss_sum(g: &mut Graph, pred: Var, gt: &[Bbox]) -> Result<Var> {
    let gi = giou_graph(g, pred, gt)?;
    let s = g.sum(gi)?;
    let neg = g.mul_scalar(s, -1.0)?;
    Ok(g.add_scalar(neg, gt.len() as f64)?)
}

fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = g.mul_scalar(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.expect("at least one term"))
}

#[derive(Clone, Copy, Debug)]
pub struct QgnLoss {
    pub total: Var,
    pub objectness: f64,
    pub giou: f64,
    pub matched: usize,
}

/// Focal objectness over every location plus GIoU over matched ones, both
/// divided by the number of matches (at least one).
pub fn qgn_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    assign: &QgnAssignment,
    gt: &SceneAnnotation,
    weights: &LossWeights,
) -> Result<QgnLoss> {
    let sigma = &assign.assignment.sigma;
    let targets: Vec<f64> = sigma.iter().map(|s| if s.is_some() { 1.0 } else { 0.0 }).collect();
    let matched = assign.assignment.matched();
    let norm = 1.0 / matched.max(1) as f64;
    let focal = g.sigmoid_focal(logits, &targets, weights.focal.gamma, weights.focal.alpha)?;
    let focal = g.sum(focal)?;
    let objectness = g.value(focal).item() * norm;
    let mut terms = vec![(focal, weights.lambda_obj * norm)];
    let mut giou_value = 0.0;
    if matched > 0 {
        let (rows, gts): (Vec<usize>, Vec<Bbox>) = assign.assignment.pairs().map(|(i, j)| (i, gt.boxes[j])).unzip();
        let sel = g.index_select(boxes, 1, &rows)?;
        let sel = g.transpose(sel)?;
        let gl = giou_loss_sum(g, sel, &gts)?;
        giou_value = g.value(gl).item() * norm;
        terms.push((gl, weights.lambda_giou * norm));
    }
    let total = weighted_sum(g, &terms)?;
    Ok(QgnLoss {
        total,
        objectness,
        giou: giou_value,
        matched,
    })
}

/// One decoder stage's raw outputs.
#[derive(Clone, Copy, Debug)]
pub struct StagePrediction {
    /// `[K, num_classes]` logits.
    pub logits: Var,
    /// `[K, 4]` boxes in pixels.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct RcnnLoss {
    pub total: Var,
    pub per_stage: Vec<f64>,
    pub assignments: Vec<Assignment>,
}

fn rows_of(data: &[f64], k: usize) -> Vec<Bbox> {
    (0..k).map(|i| Bbox::new(data[4 * i], data[4 * i + 1], data[4 * i + 2], data[4 * i + 3])).collect()
}

/// Set loss for one stage: Hungarian matching on classification, L1 and GIoU
/// costs, then focal classification over all queries and box losses over
/// matched ones, normalized by the number of ground truths (at least one).
pub fn stage_set_loss(
    g: &mut Graph,
    pred: StagePrediction,
    gt: &SceneAnnotation,
    image_width: f64,
    image_height: f64,
    weights: &LossWeights,
) -> Result<(Var, Assignment)> {
    let shape = g.shape(pred.logits).to_vec();
    let [k, classes] = shape[..] else {
        return Err(Error::Assignment(format!("logits must be [K, classes], got {shape:?}")));
    };
    if g.shape(pred.boxes) != [k, 4] {
        return Err(Error::Assignment(format!("boxes must be [{k}, 4], got {:?}", g.shape(pred.boxes))));
    }
    let m = gt.len();
    if k < m {
        return Err(Error::Assignment(format!("{k} predictions cannot cover {m} ground truths")));
    }
    let rw = &weights.rcnn;
    let probs: Vec<f64> = g.data(pred.logits).iter().map(|&z| sigmoid(z)).collect();
    let boxes = rows_of(g.data(pred.boxes), k);
    let scale = [1.0 / image_width, 1.0 / image_height, 1.0 / image_width, 1.0 / image_height];
    let mut cost = vec![0.0; k * m];
    for i in 0..k {
        for j in 0..m {
            let p = probs[i * classes + gt.labels[j]];
            let cls = focal_loss(p, true, weights.focal) - focal_loss(p, false, weights.focal);
            let l1: f64 = (0..4)
                .map(|c| (boxes[i].to_array()[c] - gt.boxes[j].to_array()[c]).abs() * scale[c])
                .sum();
            let gi = 1.0 - giou(&boxes[i], &gt.boxes[j]);
            cost[i * m + j] = rw.lambda_cls * cls + rw.lambda_l1 * l1 + rw.lambda_giou * gi;
        }
    }
    let assignment = hungarian(&cost, k, m)?;
    let norm = 1.0 / m.max(1) as f64;

    let mut targets = vec![0.0; k * classes];
    for (i, j) in assignment.pairs() {
        targets[i * classes + gt.labels[j]] = 1.0;
    }
    let focal = g.sigmoid_focal(pred.logits, &targets, weights.focal.gamma, weights.focal.alpha)?;
    let focal = g.sum(focal)?;
    let mut terms = vec![(focal, rw.lambda_cls * norm)];
    if m > 0 {
        let (rows, gts): (Vec<usize>, Vec<Bbox>) = assignment.pairs().map(|(i, j)| (i, gt.boxes[j])).unzip();
        let p = rows.len();
        let sel = g.index_select(pred.boxes, 0, &rows)?;
        let target = g.constant(Array::from_parts(vec![p, 4], gts.iter().flat_map(|b| b.to_array()).collect()));
        let scales = g.constant(Array::from_parts(vec![p, 4], scale.repeat(p)));
        let diff = g.sub(sel, target)?;
        let diff = g.mul(diff, scales)?;
        let diff = g.abs(diff)?;
        let l1 = g.sum(diff)?;
        let gl = giou_loss_sum(g, sel, &gts)?;
        terms.push((l1, rw.lambda_l1 * norm));
        terms.push((gl, rw.lambda_giou * norm));
    }
    Ok((weighted_sum(g, &terms)?, assignment))
}

/// Sum of [`stage_set_loss`] over every stage, each matched independently.
pub fn rcnn_set_loss(
    g: &mut Graph,
    stages: &[StagePrediction],
    gt: &SceneAnnotation,
    image_width: f64,
    image_height: f64,
    weights: &LossWeights,
) -> Result<RcnnLoss> {
    let mut parts = Vec::with_capacity(stages.len());
    let mut per_stage = Vec::with_capacity(stages.len());
    let mut assignments = Vec::with_capacity(stages.len());
    for &s in stages {
        let (l, a) = stage_set_loss(g, s, gt, image_width, image_height, weights)?;
        per_stage.push(g.value(l).item());
        parts.push((l, 1.0));
        assignments.push(a);
    }
    if parts.is_empty() {
        return Err(Error::Assignment("no decoder stages".into()));
    }
    Ok(RcnnLoss {
        total: weighted_sum(g, &parts)?,
        per_stage,
        assignments,
    })
}
