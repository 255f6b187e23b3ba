//! Average precision, proposal recall and the evaluation report.

use crate::bbox::Bbox;
use crate::detector::{Detection, Model};
use crate::error::{Error, Result};

use super::Scene;

/// IoU thresholds 0.50, 0.55, ..., 0.95, computed without accumulated drift.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Marks each detection true or false positive. Detections are visited by
/// descending score (ties by image, then position) and each claims the
/// unclaimed ground truth of highest IoU at or above `iou_threshold`.
/// Returns `(score, is_tp)` in visiting order.
pub fn match_detections(dets: &[Vec<(Bbox, f64)>], gts: &[Vec<Bbox>], iou_threshold: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
    order.sort_by(|&(ia, ja), &(ib, jb)| dets[ib][jb].1.total_cmp(&dets[ia][ja].1).then((ia, ja).cmp(&(ib, jb))));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|(i, j)| {
            let (b, score) = dets[i][j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts.get(i).map(Vec::as_slice).unwrap_or(&[]).iter().enumerate() {
                let iou = b.iou(g);
                if !claimed[i][k] && iou >= iou_threshold && best.map_or(true, |(_, v)| iou > v) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                claimed[i][k] = true;
            }
            (score, best.is_some())
        })
        .collect()
}

/// All-point interpolated AP: the area under the precision envelope
/// `p(r) = max_{r' >= r} precision(r')`. Zero without ground truth.
pub fn average_precision(dets: &[Vec<(Bbox, f64)>], gts: &[Vec<Bbox>], iou_threshold: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let flags = match_detections(dets, gts, iou_threshold);
    let (mut tp, mut points) = (0usize, Vec::with_capacity(flags.len()));
    for (rank, &(_, hit)) in flags.iter().enumerate() {
        tp += usize::from(hit);
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Fraction of ground truths with at least one proposal of IoU `>= t`,
/// for every `t` in `iou_grid`.
pub fn recall_curve(proposals: &[Vec<Bbox>], gts: &[Vec<Bbox>], iou_grid: &[f64]) -> Vec<(f64, f64)> {
    let best: Vec<f64> = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| {
            let props = proposals.get(i).map(Vec::as_slice).unwrap_or(&[]);
            g.iter().map(move |gt| props.iter().map(|p| p.iou(gt)).fold(0.0, f64::max))
        })
        .collect();
    iou_grid
        .iter()
        .map(|&t| {
            let hit = best.iter().filter(|&&v| v >= t).count();
            (t, if best.is_empty() { 0.0 } else { hit as f64 / best.len() as f64 })
        })
        .collect()
}

/// Recall averaged over IoU 0.50:0.05:0.95 using each image's first `k`
/// proposals (proposals are expected in rank order).
pub fn ar_at_k(proposals: &[Vec<Bbox>], gts: &[Vec<Bbox>], ks: &[usize]) -> Vec<(usize, f64)> {
    let grid = coco_thresholds();
    ks.iter()
        .map(|&k| {
            let cut: Vec<Vec<Bbox>> = proposals.iter().map(|p| p[..k.min(p.len())].to_vec()).collect();
            let curve = recall_curve(&cut, gts, &grid);
            (k, curve.iter().map(|c| c.1).sum::<f64>() / grid.len() as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(threshold, AP)` over 0.50:0.05:0.95, each averaged over classes.
    pub ap_per_iou: Vec<(f64, f64)>,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    /// AP at IoU 0.5 per class; `None` for classes without ground truth.
    pub per_class_ap50: Vec<Option<f64>>,
    /// Average recall of the top-`k` detections (class-agnostic).
    pub ar_at_k: Vec<(usize, f64)>,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
}

impl EvalReport {
    /// Scores `detections[i]` against `scenes[i]`.
    pub fn from_detections(scenes: &[Scene], detections: &[Vec<Detection>], num_classes: usize) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Dataset("no scenes to evaluate".into()));
        }
        if scenes.len() != detections.len() {
            return Err(Error::Dataset(format!("{} scenes but {} detection lists", scenes.len(), detections.len())));
        }
        let per_class = |c: usize| -> (Vec<Vec<(Bbox, f64)>>, Vec<Vec<Bbox>>) {
            let d = detections
                .iter()
                .map(|ds| ds.iter().filter(|d| d.class == c).map(|d| (d.bbox, d.score)).collect())
                .collect();
            let g = scenes
                .iter()
                .map(|s| {
                    s.annotation.boxes.iter().zip(&s.annotation.labels).filter(|(_, &l)| l == c).map(|(b, _)| *b).collect()
                })
                .collect();
            (d, g)
        };
        let classes: Vec<_> = (0..num_classes).map(per_class).collect();
        let present: Vec<bool> = classes.iter().map(|(_, g)| g.iter().any(|v| !v.is_empty())).collect();
        let n_present = present.iter().filter(|&&p| p).count();
        let class_mean = |t: f64| -> f64 {
            if n_present == 0 {
                return 0.0;
            }
            classes
                .iter()
                .zip(&present)
                .filter(|(_, &p)| p)
                .map(|((d, g), _)| average_precision(d, g, t))
                .sum::<f64>()
                / n_present as f64
        };
        let ap_per_iou: Vec<(f64, f64)> = coco_thresholds().into_iter().map(|t| (t, class_mean(t))).collect();
        let per_class_ap50 = classes
            .iter()
            .zip(&present)
            .map(|((d, g), &p)| p.then(|| average_precision(d, g, 0.5)))
            .collect();
        let ranked: Vec<Vec<Bbox>> = detections.iter().map(|ds| ds.iter().map(|d| d.bbox).collect()).collect();
        let gts: Vec<Vec<Bbox>> = scenes.iter().map(|s| s.annotation.boxes.clone()).collect();
        let max_k = ranked.iter().map(Vec::len).max().unwrap_or(0);
        let mut ks: Vec<usize> = [1, 10, 100].into_iter().filter(|&k| k < max_k).collect();
        ks.push(max_k.max(1));
        Ok(Self {
            ap50: ap_per_iou[0].1,
            ap75: ap_per_iou[5].1,
            map: ap_per_iou.iter().map(|v| v.1).sum::<f64>() / ap_per_iou.len() as f64,
            ap_per_iou,
            per_class_ap50,
            ar_at_k: ar_at_k(&ranked, &gts, &ks),
            images: scenes.len(),
            ground_truths: gts.iter().map(Vec::len).sum(),
            detections: ranked.iter().map(Vec::len).sum(),
        })
    }

    /// Runs `model` on every scene and scores the detections.
    pub fn evaluate(model: &Model, scenes: &[Scene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Dataset("no scenes to evaluate".into()));
        }
        let dets = scenes.iter().map(|s| model.infer(&s.image)).collect::<Result<Vec<_>>>()?;
        Self::from_detections(scenes, &dets, model.config.num_classes)
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: String, v: f64| s.push_str(&format!("{k},{v}\n"));
        row("ap50".into(), self.ap50);
        row("ap75".into(), self.ap75);
        row("map".into(), self.map);
        for (t, v) in &self.ap_per_iou {
            row(format!("ap@{t:.2}"), *v);
        }
        for (c, v) in self.per_class_ap50.iter().enumerate() {
            if let Some(v) = v {
                row(format!("ap50_class{c}"), *v);
            }
        }
        for (k, v) in &self.ar_at_k {
            row(format!("ar@{k}"), *v);
        }
        row("images".into(), self.images as f64);
        row("ground_truths".into(), self.ground_truths as f64);
        row("detections".into(), self.detections as f64);
        s
    }
}

/// Recall curve of the pre-refinement proposals over `scenes`.
pub fn proposal_recall(model: &Model, scenes: &[Scene], iou_grid: &[f64]) -> Result<(Vec<(f64, f64)>, Vec<Vec<Bbox>>)> {
    if scenes.is_empty() {
        return Err(Error::Dataset("no scenes to evaluate".into()));
    }
    let props = scenes.iter().map(|s| model.proposals(&s.image)).collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Bbox>> = scenes.iter().map(|s| s.annotation.boxes.clone()).collect();
    Ok((recall_curve(&props, &gts, iou_grid), props))
}
