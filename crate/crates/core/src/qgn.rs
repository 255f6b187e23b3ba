//! Query generation: a dense anchor-free head over the pyramid and top-K
//! selection of locations into featurized queries.
//!
//! Every location carries an objectness logit, `ltrb` distances to the four
//! box sides and a query vector. The selected boxes stay attached to the graph
//! so losses on later stages reach the dense head.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Conv, FeaturePyramid, LINEAR_GAIN, RELU_GAIN};
use crate::bbox::Bbox;
use crate::error::Result;
use crate::ndgrad::{sigmoid, Array, Var};
use crate::params::{Ctx, ParamStore};

/// Initial objectness bias; `sigmoid(-2) ≈ 0.12`.
pub const OBJECTNESS_BIAS: f64 = -2.0;
/// Raw `ltrb` outputs are clamped to this magnitude before `exp`.
pub const LTRB_RAW_LIMIT: f64 = 8.0;

/// A cell of a pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Location {
    pub level: u8,
    pub row: usize,
    pub col: usize,
}

impl Location {
    pub fn stride(&self) -> f64 {
        (1u64 << self.level) as f64
    }

    /// Cell centre in image pixels.
    pub fn center(&self) -> (f64, f64) {
        let s = self.stride();
        ((self.col as f64 + 0.5) * s, (self.row as f64 + 0.5) * s)
    }
}

/// Box from a location and its `ltrb` distances, clipped to the image.
pub fn decode_location(loc: Location, ltrb: [f64; 4], image_width: f64, image_height: f64) -> Bbox {
    let (cx, cy) = loc.center();
    let [l, t, r, b] = ltrb;
    Bbox::new(cx - l, cy - t, cx + r, cy + b).clip(image_width, image_height)
}

/// Distances from the location centre to the sides of `gt`; inverse of
/// [`decode_location`] for centres inside the box.
pub fn encode_location(loc: Location, gt: &Bbox) -> [f64; 4] {
    let (cx, cy) = loc.center();
    [cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy]
}

/// Per-level dense outputs.
#[derive(Clone, Copy, Debug)]
pub struct DenseLevelPrediction {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    /// `[H, W]` logits.
    pub objectness: Var,
    /// `[4, H, W]` distances in pixels, nonnegative.
    pub ltrb: Var,
    /// `[D, H, W]`.
    pub query_map: Var,
}

/// All levels flattened in `(level, row, col)` order.
#[derive(Clone, Debug)]
pub struct DenseSet {
    pub locations: Vec<Location>,
    /// `[L]` objectness logits.
    pub logits: Var,
    /// `[4, L]` decoded and clipped boxes, rows `x1, y1, x2, y2`.
    pub boxes: Var,
    /// `[D, L]` query vectors.
    pub features: Var,
    pub image_width: f64,
    pub image_height: f64,
}

impl DenseSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn probabilities(&self, ctx: &Ctx<'_>) -> Vec<f64> {
        ctx.g.data(self.logits).iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn box_values(&self, ctx: &Ctx<'_>) -> Vec<Bbox> {
        let d = ctx.g.data(self.boxes);
        let n = self.len();
        (0..n)
            .map(|i| Bbox::new(d[i], d[n + i], d[2 * n + i], d[3 * n + i]))
            .collect()
    }
}

/// Featurized queries: row `i` of every field refers to the same location.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub scores: Vec<f64>,
    pub boxes: Vec<Bbox>,
    /// `[K, 4]` boxes, attached to the graph.
    pub box_var: Var,
    /// `[K, D]`.
    pub features: Var,
    pub provenance: Vec<Location>,
    /// Fewer locations than requested queries existed.
    pub shortfall: bool,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Indices of the `k` largest scores, ordered by descending score and then
/// by index. Indices follow `(level, row, col)` order, so the index
/// tie-break is the lexicographic one.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    tower: Conv,
    objectness: Conv,
    ltrb: Conv,
    query: Conv,
    query_dim: usize,
}

impl QueryGenerator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, query_dim: usize) -> Self {
        let tower = Conv::new(store, rng, "qgn.tower", channels, channels, 3, 1, RELU_GAIN);
        let objectness = Conv::new(store, rng, "qgn.objectness", channels, 1, 1, 1, LINEAR_GAIN);
        store.get_mut(objectness.b).data_mut()[0] = OBJECTNESS_BIAS;
        let ltrb = Conv::new(store, rng, "qgn.ltrb", channels, 4, 1, 1, LINEAR_GAIN * 0.1);
        let query = Conv::new(store, rng, "qgn.query", channels, query_dim, 1, 1, LINEAR_GAIN);
        Self {
            tower,
            objectness,
            ltrb,
            query,
            query_dim,
        }
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    /// Shared head applied to every level.
    pub fn dense_head(&self, ctx: &mut Ctx<'_>, pyramid: &FeaturePyramid) -> Result<Vec<DenseLevelPrediction>> {
        let mut out = Vec::with_capacity(pyramid.levels.len());
        for lvl in &pyramid.levels {
            let (h, w) = (lvl.height, lvl.width);
            let t = self.tower.forward(ctx, lvl.map)?;
            let t = ctx.g.relu(t)?;
            let obj = self.objectness.forward(ctx, t)?;
            let objectness = ctx.g.reshape(obj, &[h, w])?;
            let raw = self.ltrb.forward(ctx, t)?;
            let raw = ctx.g.clamp(raw, -LTRB_RAW_LIMIT, LTRB_RAW_LIMIT)?;
            let e = ctx.g.exp(raw)?;
            let ltrb = ctx.g.mul_scalar(e, lvl.stride as f64)?;
            let query_map = self.query.forward(ctx, t)?;
            out.push(DenseLevelPrediction {
                level: lvl.level,
                height: h,
                width: w,
                objectness,
                ltrb,
                query_map,
            });
        }
        Ok(out)
    }

    /// Dense head plus flattening.
    pub fn dense_set(&self, ctx: &mut Ctx<'_>, pyramid: &FeaturePyramid) -> Result<DenseSet> {
        let preds = self.dense_head(ctx, pyramid)?;
        flatten(ctx, &preds, pyramid.image_width as f64, pyramid.image_height as f64)
    }
}

/// Concatenates levels and decodes every location's box in the graph.
pub fn flatten(
    ctx: &mut Ctx<'_>,
    preds: &[DenseLevelPrediction],
    image_width: f64,
    image_height: f64,
) -> Result<DenseSet> {
    let mut locations = Vec::new();
    let (mut logits, mut ltrbs, mut feats) = (Vec::new(), Vec::new(), Vec::new());
    for p in preds {
        let n = p.height * p.width;
        for row in 0..p.height {
            for col in 0..p.width {
                locations.push(Location {
                    level: p.level,
                    row,
                    col,
                });
            }
        }
        logits.push(ctx.g.reshape(p.objectness, &[n])?);
        ltrbs.push(ctx.g.reshape(p.ltrb, &[4, n])?);
        let d = ctx.g.shape(p.query_map)[0];
        feats.push(ctx.g.reshape(p.query_map, &[d, n])?);
    }
    let logits = ctx.g.concat(&logits, 0)?;
    let ltrb = ctx.g.concat(&ltrbs, 1)?;
    let features = ctx.g.concat(&feats, 1)?;

    let n = locations.len();
    let mut centers = vec![0.0; 4 * n];
    for (i, loc) in locations.iter().enumerate() {
        let (cx, cy) = loc.center();
        centers[i] = cx;
        centers[n + i] = cy;
        centers[2 * n + i] = cx;
        centers[3 * n + i] = cy;
    }
    let mut signs = vec![1.0; 4 * n];
    signs[..2 * n].iter_mut().for_each(|s| *s = -1.0);
    let mut bounds = vec![image_width; 4 * n];
    for r in [1, 3] {
        bounds[r * n..(r + 1) * n].iter_mut().for_each(|b| *b = image_height);
    }
    let centers = ctx.g.constant(Array::new(&[4, n], centers)?);
    let signs = ctx.g.constant(Array::new(&[4, n], signs)?);
    let zeros = ctx.g.constant(Array::zeros(&[4, n]));
    let bounds = ctx.g.constant(Array::new(&[4, n], bounds)?);
    let offsets = ctx.g.mul(ltrb, signs)?;
    let raw = ctx.g.add(centers, offsets)?;
    let lower = ctx.g.maximum(raw, zeros)?;
    let boxes = ctx.g.minimum(lower, bounds)?;
    Ok(DenseSet {
        locations,
        logits,
        boxes,
        features,
        image_width,
        image_height,
    })
}

/// The `k` most confident locations as featurized queries.
pub fn select_queries(ctx: &mut Ctx<'_>, dense: &DenseSet, k: usize) -> Result<QuerySet> {
    assert!(k >= 1, "at least one query");
    let scores_all = dense.probabilities(ctx);
    let idx = top_k(&scores_all, k);
    let all_boxes = dense.box_values(ctx);
    let f = ctx.g.index_select(dense.features, 1, &idx)?;
    let features = ctx.g.transpose(f)?;
    let b = ctx.g.index_select(dense.boxes, 1, &idx)?;
    let box_var = ctx.g.transpose(b)?;
    Ok(QuerySet {
        scores: idx.iter().map(|&i| scores_all[i]).collect(),
        boxes: idx.iter().map(|&i| all_boxes[i]).collect(),
        box_var,
        features,
        provenance: idx.iter().map(|&i| dense.locations[i]).collect(),
        shortfall: idx.len() < k,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::params::param_grad_check;

    struct Fixture {
        store: ParamStore,
        backbone: Backbone,
        qgn: QueryGenerator,
    }

    fn fixture(channels: usize, dim: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BackboneConfig {
            widths: [4, 4, 4, 4],
            fpn_channels: channels,
            ..Default::default()
        };
        let backbone = Backbone::new(&cfg, &mut store, &mut rng).unwrap();
        let qgn = QueryGenerator::new(&mut store, &mut rng, channels, dim);
        Fixture { store, backbone, qgn }
    }

    fn image(seed: u64, size: usize) -> Array {
        crate::ndgrad::suite::random_array(&mut ChaCha8Rng::seed_from_u64(seed), &[3, size, size], 0.0, 1.0)
    }

    #[test]
    fn decode_examples() {
        let loc = Location { level: 3, row: 1, col: 1 };
        assert_eq!(loc.center(), (12.0, 12.0));
        assert_eq!(decode_location(loc, [2.0, 3.0, 4.0, 5.0], 64.0, 64.0), Bbox::new(10.0, 9.0, 16.0, 17.0));
        assert_eq!(decode_location(loc, [0.0; 4], 64.0, 64.0), Bbox::new(12.0, 12.0, 12.0, 12.0));
        assert_eq!(decode_location(loc, [20.0, 20.0, 60.0, 60.0], 64.0, 64.0), Bbox::new(0.0, 0.0, 64.0, 64.0));
    }

    #[test]
    fn zero_weights_give_uniform_objectness_and_stride_sized_boxes() {
        let mut f = fixture(8, 16);
        for id in f.store.ids().collect::<Vec<_>>() {
            if f.store.name(id).starts_with("qgn.") && f.store.name(id) != "qgn.objectness.bias" {
                f.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut ctx = Ctx::inference(&f.store);
        let img = ctx.g.constant(image(1, 64));
        let pyr = f.backbone.extract_pyramid(&mut ctx, img).unwrap();
        let preds = f.qgn.dense_head(&mut ctx, &pyr).unwrap();
        assert_eq!(preds.len(), 5);
        for p in &preds {
            assert_eq!(ctx.g.shape(p.query_map), &[16, p.height, p.width]);
            for &z in ctx.g.data(p.objectness) {
                assert!((sigmoid(z) - 0.119_202_922_022_118).abs() < 1e-12);
            }
            let stride = (1u64 << p.level) as f64;
            assert!(ctx.g.data(p.ltrb).iter().all(|&d| d == stride));
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.9, 0.1, 0.5], 2), vec![0, 2]);
        assert_eq!(top_k(&[0.3, 0.2], 5), vec![0, 1]);
        assert_eq!(top_k(&[0.5; 6], 3), vec![0, 1, 2]);
    }

    #[test]
    fn selected_features_match_query_map() {
        let f = fixture(8, 16);
        let mut ctx = Ctx::inference(&f.store);
        let img = ctx.g.constant(image(2, 64));
        let pyr = f.backbone.extract_pyramid(&mut ctx, img).unwrap();
        let preds = f.qgn.dense_head(&mut ctx, &pyr).unwrap();
        let dense = flatten(&mut ctx, &preds, 64.0, 64.0).unwrap();
        assert_eq!(dense.len(), 64 + 16 + 4 + 1 + 1);
        let qs = select_queries(&mut ctx, &dense, 10).unwrap();
        assert!(!qs.shortfall);
        let feats = ctx.g.value(qs.features).clone();
        let bv = ctx.g.data(qs.box_var).to_vec();
        for (i, loc) in qs.provenance.iter().enumerate() {
            let p = preds.iter().find(|p| p.level == loc.level).unwrap();
            let map = ctx.g.data(p.query_map);
            let hw = p.height * p.width;
            for c in 0..16 {
                assert_eq!(feats.row(i)[c], map[c * hw + loc.row * p.width + loc.col]);
            }
            let ltrb = ctx.g.data(p.ltrb);
            let d: [f64; 4] = std::array::from_fn(|s| ltrb[s * hw + loc.row * p.width + loc.col]);
            let expect = decode_location(*loc, d, 64.0, 64.0);
            assert_eq!(qs.boxes[i], expect);
            assert_eq!(&bv[i * 4..i * 4 + 4], &expect.to_array());
            assert!(expect.x1 <= expect.x2 && expect.y1 <= expect.y2);
        }
        for w in qs.scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let all = select_queries(&mut ctx, &dense, 200).unwrap();
        assert!(all.shortfall);
        assert_eq!(all.len(), dense.len());
    }

    #[test]
    fn gradients_reach_dense_head_through_queries() {
        let f = fixture(4, 6);
        let img = image(3, 32);
        let readout = |ctx: &mut Ctx<'_>| -> Result<Var> {
            let x = ctx.g.constant(img.clone());
            let pyr = f.backbone.extract_pyramid(ctx, x)?;
            let dense = f.qgn.dense_set(ctx, &pyr)?;
            let qs = select_queries(ctx, &dense, 5)?;
            let a = ctx.g.sum(qs.features)?;
            let b = ctx.g.mul_scalar(qs.box_var, 0.01)?;
            let b = ctx.g.sum(b)?;
            Ok(ctx.g.add(a, b)?)
        };
        for name in ["qgn.query.weight", "qgn.ltrb.weight", "qgn.tower.weight"] {
            let id = f.store.id(name).unwrap();
            let err = param_grad_check(&f.store, id, 1e-6, readout).unwrap();
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    proptest! {
        #[test]
        fn top_k_matches_full_sort(scores in proptest::collection::vec(0u8..4, 1..40), k in 1usize..50) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 4.0).collect();
            let mut order: Vec<(i64, usize)> = s.iter().enumerate().map(|(i, &v)| (-(v * 4.0) as i64, i)).collect();
            order.sort();
            let expect: Vec<usize> = order.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(top_k(&s, k), expect);
        }

        #[test]
        fn encode_then_decode_is_identity(
            x1 in 0.0f64..30.0, y1 in 0.0f64..30.0, w in 8.0f64..30.0, h in 8.0f64..30.0, level in 3u8..5
        ) {
            let gt = Bbox::new(x1, y1, x1 + w, y1 + h);
            let s = (1u64 << level) as f64;
            let (cx, cy) = gt.center();
            let loc = Location { level, row: (cy / s) as usize, col: (cx / s) as usize };
            let (lx, ly) = loc.center();
            prop_assume!(gt.contains_point(lx, ly));
            let back = decode_location(loc, encode_location(loc, &gt), 64.0, 64.0);
            for (a, b) in back.to_array().iter().zip(gt.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
