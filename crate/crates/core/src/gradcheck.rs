//! Finite-difference checks of the composed losses, on top of the
//! per-primitive sweep in [`crate::ndgrad::suite`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{qgn_assign, qgn_loss, rcnn_set_loss, LossWeights, SceneAnnotation, StagePrediction};
use crate::bbox::Bbox;
use crate::dataeval::{generate_scene, SceneSpec};
use crate::detector::{Model, ModelConfig};
use crate::error::Result;
use crate::ndgrad::suite::random_array;
use crate::ndgrad::{grad_check, primitive_suite, sigmoid, Array, CheckReport, GradError};
use crate::params::param_grad_check;

/// Tolerance every check must meet.
pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-6;

fn to_grad(e: crate::error::Error) -> GradError {
    GradError::InvalidArgument(e.to_string())
}

fn random_scene(rng: &mut ChaCha8Rng, m: usize, size: f64) -> SceneAnnotation {
    let boxes = (0..m)
        .map(|_| {
            let (w, h) = (rng.gen_range(8.0..24.0), rng.gen_range(8.0..24.0));
            Bbox::from_center(rng.gen_range(w / 2.0..size - w / 2.0), rng.gen_range(h / 2.0..size - h / 2.0), w, h)
        })
        .collect();
    let labels = (0..m).map(|_| rng.gen_range(0..3)).collect();
    SceneAnnotation { boxes, labels }
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<Bbox> {
    (0..n)
        .map(|_| {
            let (w, h) = (rng.gen_range(6.0..26.0), rng.gen_range(6.0..26.0));
            Bbox::from_center(rng.gen_range(w / 2.0..size - w / 2.0), rng.gen_range(h / 2.0..size - h / 2.0), w, h)
        })
        .collect()
}

/// Query-generation loss with respect to objectness logits and boxes.
fn qgn_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::default();
    let m = rng.gen_range(1..4);
    let gt = random_scene(&mut rng, m, 64.0);
    let n = 8;
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let pred = random_boxes(&mut rng, n, 64.0);
    let centers: Vec<(f64, f64)> = pred.iter().map(Bbox::center).collect();
    let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let qa = qgn_assign(&probs, &pred, &centers, &gt, weights.matching)?;
    let logits = Array::from_vec(z);
    let mut cols = vec![0.0; 4 * n];
    for (i, b) in pred.iter().enumerate() {
        for (k, v) in b.to_array().into_iter().enumerate() {
            cols[k * n + i] = v;
        }
    }
    let boxes = Array::new(&[4, n], cols)?;
    let e1 = grad_check(
        |g, v| {
            let b = g.constant(boxes.clone());
            Ok(qgn_loss(g, v, b, &qa, &gt, &weights).map_err(to_grad)?.total)
        },
        &logits,
        STEP,
    )?;
    let e2 = grad_check(
        |g, v| {
            let l = g.constant(logits.clone());
            Ok(qgn_loss(g, l, v, &qa, &gt, &weights).map_err(to_grad)?.total)
        },
        &boxes,
        STEP,
    )?;
    Ok(e1.max(e2))
}

/// Two-stage set loss with respect to every stage's logits and boxes.
fn rcnn_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::default();
    let m = rng.gen_range(1..4);
    let gt = random_scene(&mut rng, m, 64.0);
    let k = 5;
    let arrays: Vec<(Array, Array)> = (0..2)
        .map(|_| {
            let logits = random_array(&mut rng, &[k, 3], -2.0, 2.0);
            let flat = random_boxes(&mut rng, k, 64.0).iter().flat_map(|b| b.to_array()).collect();
            (logits, Array::new(&[k, 4], flat).expect("k x 4"))
        })
        .collect();
    let mut worst = 0.0f64;
    for target in 0..4 {
        let x = if target % 2 == 0 { &arrays[target / 2].0 } else { &arrays[target / 2].1 };
        let e = grad_check(
            |g, v| {
                let mut preds = Vec::new();
                for (s, (l, b)) in arrays.iter().enumerate() {
                    let lv = if target == 2 * s { v } else { g.constant(l.clone()) };
                    let bv = if target == 2 * s + 1 { v } else { g.constant(b.clone()) };
                    preds.push(StagePrediction { logits: lv, boxes: bv });
                }
                Ok(rcnn_set_loss(g, &preds, &gt, 64.0, 64.0, &weights).map_err(to_grad)?.total)
            },
            x,
            STEP,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn tiny_model(seed: u64) -> Result<Model> {
    Model::new(&ModelConfig {
        num_queries: 5,
        d_model: 16,
        fpn_channels: 8,
        backbone_widths: [4, 8, 8, 8],
        heads: 2,
        dynamic_dim: 4,
        ffn_dim: 16,
        roi_size: 3,
        seed,
        ..ModelConfig::default()
    })
}

/// Whole-image training loss with respect to parameters at both ends of the
/// network. Boxes feed later RoI sampling as plain numbers, so parameters
/// that move a non-final stage's boxes are left out: their finite difference
/// would include a path the gradient intentionally stops.
fn image_loss_case(seed: u64) -> Result<f64> {
    let mut model = tiny_model(seed)?;
    // The zero-initialized regression layer reproduces its input boxes, which
    // sit exactly on the clipping kink whenever they touch the image border.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["head.stage2.reg.weight", "head.stage2.reg.bias"] {
        let id = model.params.id(name).expect("parameter exists");
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
    let spec = SceneSpec {
        height: 32,
        width: 32,
        min_objects: 1,
        max_objects: 2,
        max_size: 16,
        ..SceneSpec::default()
    };
    let scene = generate_scene(seed, &spec)?.scene;
    let mut worst = 0.0f64;
    for name in ["head.stage2.cls.bias", "head.stage2.reg.bias", "qgn.objectness.bias", "qgn.query.bias"] {
        let id = model.params.id(name).expect("parameter exists");
        let e = param_grad_check(&model.params, id, STEP, |ctx| {
            Ok(model.image_loss(ctx, &scene.image, &scene.annotation)?.0)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Worst error per composed loss over `seeds` seeds each.
pub fn loss_suite(seeds: usize) -> Result<Vec<CheckReport>> {
    let cases: [(&'static str, fn(u64) -> Result<f64>); 3] =
        [("qgn_loss", qgn_case), ("rcnn_set_loss", rcnn_case), ("image_loss", image_loss_case)];
    cases
        .into_iter()
        .map(|(name, f)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                worst = worst.max(f(7000 + s as u64)?);
            }
            Ok(CheckReport { name, seeds, max_error: worst })
        })
        .collect()
}

/// Primitives followed by composed losses.
pub fn full_suite(seeds: usize) -> Result<Vec<CheckReport>> {
    let mut all = primitive_suite(seeds, STEP)?;
    all.extend(loss_suite(seeds)?);
    Ok(all)
}
