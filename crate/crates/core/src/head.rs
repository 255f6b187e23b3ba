//! Query-based decoder: RoI-Align, query self-attention, dynamic
//! convolution, optional attention among pooled RoI vectors, and an FFN with
//! classification and box-refinement branches. Stages chain into a cascade.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, LINEAR_GAIN, RELU_GAIN};
use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};
use crate::ndgrad::{sigmoid, Array, Var};
use crate::params::{Ctx, ParamId, ParamStore};

/// Scale deltas are clamped to `±ln(1000 / 16)`.
pub const MAX_SCALE_DELTA: f64 = 4.135_166_556_742_356;
/// Widths and heights below this are raised to it before refinement.
pub const MIN_BOX_SIZE: f64 = 1.0;
/// Bilinear points per bin side.
pub const SAMPLING: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub d_model: usize,
    /// Channel width of the pyramid.
    pub channels: usize,
    pub heads: usize,
    pub roi_size: usize,
    pub dynamic_dim: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub roi_self_attention: bool,
    /// Box side that maps to level 4.
    pub canonical_size: f64,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let sizes = [self.d_model, self.channels, self.roi_size, self.dynamic_dim, self.ffn_dim, self.num_classes];
        if sizes.contains(&0) {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if !(self.canonical_size > 0.0) {
            return Err(Error::Config("canonical_size must be positive".into()));
        }
        Ok(())
    }
}

/// Pyramid level for a box of the given area:
/// `clamp(floor(4 + log2(sqrt(area) / canonical)), lo, hi)`.
pub fn roi_level(area: f64, canonical: f64, lo: u8, hi: u8) -> u8 {
    if area <= 0.0 {
        return lo;
    }
    let l = (4.0 + (area.sqrt() / canonical).log2()).floor();
    l.clamp(lo as f64, hi as f64) as u8
}

/// Sample points of one box in image pixels, ordered by bin row, bin column,
/// then point row and column.
pub fn roi_sample_points(b: &Bbox, s: usize) -> Vec<(f64, f64)> {
    let (bw, bh) = (b.width() / s as f64, b.height() / s as f64);
    let mut pts = Vec::with_capacity(s * s * SAMPLING * SAMPLING);
    for by in 0..s {
        for bx in 0..s {
            for ay in 0..SAMPLING {
                for ax in 0..SAMPLING {
                    let fx = (ax as f64 + 0.5) / SAMPLING as f64;
                    let fy = (ay as f64 + 0.5) / SAMPLING as f64;
                    pts.push((b.x1 + (bx as f64 + fx) * bw, b.y1 + (by as f64 + fy) * bh));
                }
            }
        }
    }
    pts
}

/// Pools an `s × s` grid per box from the level chosen by [`roi_level`].
/// Returns `[K, s², C]`, rows in box order.
pub fn roi_align(ctx: &mut Ctx<'_>, pyramid: &FeaturePyramid, boxes: &[Bbox], s: usize, canonical: f64) -> Result<Var> {
    if boxes.is_empty() || s == 0 {
        return Err(Error::Config("roi_align needs at least one box and a positive grid".into()));
    }
    let c = pyramid.channels;
    let (lo, hi) = (pyramid.min_level(), pyramid.max_level());
    let levels: Vec<u8> = boxes.iter().map(|b| roi_level(b.area(), canonical, lo, hi)).collect();
    let per_box = s * s * SAMPLING * SAMPLING;
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for lvl in &pyramid.levels {
        let members: Vec<usize> = (0..boxes.len()).filter(|&i| levels[i] == lvl.level).collect();
        if members.is_empty() {
            continue;
        }
        let stride = lvl.stride as f64;
        let mut pts = Vec::with_capacity(members.len() * per_box);
        for &i in &members {
            pts.extend(roi_sample_points(&boxes[i], s).into_iter().map(|(x, y)| (x / stride - 0.5, y / stride - 0.5)));
        }
        let sampled = ctx.g.bilinear_sample(lvl.map, &pts)?;
        let grouped = ctx.g.reshape(sampled, &[members.len() * s * s, SAMPLING * SAMPLING, c])?;
        let bins = ctx.g.mean_axis(grouped, 1)?;
        parts.push(ctx.g.reshape(bins, &[members.len(), s * s * c])?);
        order.extend(members);
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        ctx.g.concat(&parts, 0)?
    };
    let mut inverse = vec![0; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    let identity = inverse.iter().enumerate().all(|(i, &p)| i == p);
    let ordered = if identity {
        stacked
    } else {
        ctx.g.index_select(stacked, 0, &inverse)?
    };
    Ok(ctx.g.reshape(ordered, &[boxes.len(), s * s, c])?)
}

/// Multi-head self-attention with a residual connection and layer norm.
#[derive(Clone, Debug)]
pub(crate) struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm: Norm,
    heads: usize,
}

impl SelfAttention {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, LINEAR_GAIN),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, LINEAR_GAIN),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, LINEAR_GAIN),
            o: Linear::new(store, rng, &format!("{name}.out"), d, d, LINEAR_GAIN),
            norm: Norm::new(store, &format!("{name}.norm"), d),
            heads,
        }
    }

    /// `[K, d] → [K, d]`.
    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let [k, d] = ctx.g.shape(x)[..] else {
            return Err(Error::Config(format!("attention input must be [K, d], got {:?}", ctx.g.shape(x))));
        };
        let (h, dh) = (self.heads, d / self.heads);
        let split = |ctx: &mut Ctx<'_>, lin: &Linear, perm: &[usize]| -> Result<Var> {
            let y = lin.forward(ctx, x)?;
            let y = ctx.g.reshape(y, &[k, h, dh])?;
            Ok(ctx.g.permute(y, perm)?)
        };
        let q = split(ctx, &self.q, &[1, 0, 2])?;
        let kt = split(ctx, &self.k, &[1, 2, 0])?;
        let v = split(ctx, &self.v, &[1, 0, 2])?;
        let scores = ctx.g.matmul(q, kt)?;
        let scores = ctx.g.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = ctx.g.softmax(scores, 2)?;
        let mixed = ctx.g.matmul(attn, v)?;
        let mixed = ctx.g.permute(mixed, &[1, 0, 2])?;
        let mixed = ctx.g.reshape(mixed, &[k, d])?;
        let out = self.o.forward(ctx, mixed)?;
        let res = ctx.g.add(x, out)?;
        self.norm.forward(ctx, res)
    }
}

/// Query-conditioned two-layer interaction with RoI features.
#[derive(Clone, Debug)]
pub(crate) struct DynamicConv {
    generator: Linear,
    norm1: Norm,
    norm2: Norm,
    out: Linear,
    norm3: Norm,
    norm: Norm,
    channels: usize,
    mid: usize,
    d: usize,
}

impl DynamicConv {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &HeadConfig) -> Self {
        let (c, mid, d, s2) = (cfg.channels, cfg.dynamic_dim, cfg.d_model, cfg.roi_size * cfg.roi_size);
        Self {
            generator: Linear::new(store, rng, &format!("{name}.generator"), d, c * mid + mid * d, LINEAR_GAIN),
            norm1: Norm::new(store, &format!("{name}.norm1"), mid),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            out: Linear::new(store, rng, &format!("{name}.out"), s2 * d, d, RELU_GAIN),
            norm3: Norm::new(store, &format!("{name}.norm3"), d),
            norm: Norm::new(store, &format!("{name}.norm"), d),
            channels: c,
            mid,
            d,
        }
    }

    /// `roi [K, s², C]`, `queries [K, d]` → `[K, d]`.
    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, roi: Var, queries: Var) -> Result<Var> {
        let (k, s2) = (ctx.g.shape(roi)[0], ctx.g.shape(roi)[1]);
        let (c, mid, d) = (self.channels, self.mid, self.d);
        let params = self.generator.forward(ctx, queries)?;
        let w1 = ctx.g.narrow(params, 1, 0, c * mid)?;
        let w1 = ctx.g.reshape(w1, &[k, c, mid])?;
        let w2 = ctx.g.narrow(params, 1, c * mid, mid * d)?;
        let w2 = ctx.g.reshape(w2, &[k, mid, d])?;
        let f = ctx.g.matmul(roi, w1)?;
        let f = self.norm1.forward(ctx, f)?;
        let f = ctx.g.relu(f)?;
        let f = ctx.g.matmul(f, w2)?;
        let f = self.norm2.forward(ctx, f)?;
        let f = ctx.g.relu(f)?;
        let f = ctx.g.reshape(f, &[k, s2 * d])?;
        let f = self.out.forward(ctx, f)?;
        let f = self.norm3.forward(ctx, f)?;
        let f = ctx.g.relu(f)?;
        let res = ctx.g.add(queries, f)?;
        self.norm.forward(ctx, res)
    }
}

/// Attention among per-RoI pooled vectors, merged into the query stream.
#[derive(Clone, Debug)]
pub(crate) struct RoiAttention {
    proj: Linear,
    attn: SelfAttention,
    norm: Norm,
}

impl RoiAttention {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &HeadConfig) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), cfg.channels, cfg.d_model, LINEAR_GAIN),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), cfg.d_model, cfg.heads),
            norm: Norm::new(store, &format!("{name}.norm"), cfg.d_model),
        }
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, roi: Var, queries: Var) -> Result<Var> {
        let pooled = ctx.g.mean_axis(roi, 1)?;
        let v = self.proj.forward(ctx, pooled)?;
        let a = self.attn.forward(ctx, v)?;
        let res = ctx.g.add(queries, a)?;
        self.norm.forward(ctx, res)
    }
}

/// Outputs of one decoder stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    /// `[K, num_classes]`.
    pub logits: Var,
    /// `[K, 4]` refined boxes, attached to the graph.
    pub boxes: Var,
    pub box_values: Vec<Bbox>,
    /// `[K, d]`.
    pub queries: Var,
}

impl StageOutput {
    /// Row-major `[K, num_classes]` probabilities.
    pub fn class_probs(&self, ctx: &Ctx<'_>) -> Vec<f64> {
        ctx.g.data(self.logits).iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Prior probability of the initial class bias.
pub const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct RcnnStage {
    self_attn: SelfAttention,
    roi_attn: Option<RoiAttention>,
    dynamic: DynamicConv,
    ffn1: Linear,
    ffn2: Linear,
    ffn_norm: Norm,
    cls_tower: Linear,
    cls_norm: Norm,
    cls: Linear,
    reg_tower: Linear,
    reg_norm: Norm,
    reg: Linear,
    cfg: HeadConfig,
}

impl RcnnStage {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let cls = Linear::new(store, rng, &format!("{name}.cls"), d, cfg.num_classes, LINEAR_GAIN);
        let prior_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store.get_mut(cls.b).data_mut().iter_mut().for_each(|b| *b = prior_bias);
        Ok(Self {
            self_attn: SelfAttention::new(store, rng, &format!("{name}.self_attn"), d, cfg.heads),
            roi_attn: cfg
                .roi_self_attention
                .then(|| RoiAttention::new(store, rng, &format!("{name}.roi_attn"), cfg)),
            dynamic: DynamicConv::new(store, rng, &format!("{name}.dynamic"), cfg),
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, cfg.ffn_dim, RELU_GAIN),
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), cfg.ffn_dim, d, LINEAR_GAIN),
            ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), d),
            cls_tower: Linear::new(store, rng, &format!("{name}.cls_tower"), d, d, RELU_GAIN),
            cls_norm: Norm::new(store, &format!("{name}.cls_norm"), d),
            cls,
            reg_tower: Linear::new(store, rng, &format!("{name}.reg_tower"), d, d, RELU_GAIN),
            reg_norm: Norm::new(store, &format!("{name}.reg_norm"), d),
            reg: Linear::zeroed(store, &format!("{name}.reg"), d, 4),
            cfg: cfg.clone(),
        })
    }

    /// Parameter ids of the final box regression layer.
    pub fn regression_params(&self) -> [ParamId; 2] {
        [self.reg.w, self.reg.b]
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        pyramid: &FeaturePyramid,
        queries: Var,
        boxes: Var,
        box_values: &[Bbox],
    ) -> Result<StageOutput> {
        let q = self.self_attn.forward(ctx, queries)?;
        let roi = roi_align(ctx, pyramid, box_values, self.cfg.roi_size, self.cfg.canonical_size)?;
        let q = match &self.roi_attn {
            Some(ra) => ra.forward(ctx, roi, q)?,
            None => q,
        };
        let q = self.dynamic.forward(ctx, roi, q)?;
        let f = self.ffn1.forward(ctx, q)?;
        let f = ctx.g.relu(f)?;
        let f = self.ffn2.forward(ctx, f)?;
        let res = ctx.g.add(q, f)?;
        let q = self.ffn_norm.forward(ctx, res)?;

        let c = self.cls_tower.forward(ctx, q)?;
        let c = self.cls_norm.forward(ctx, c)?;
        let c = ctx.g.relu(c)?;
        let logits = self.cls.forward(ctx, c)?;

        let r = self.reg_tower.forward(ctx, q)?;
        let r = self.reg_norm.forward(ctx, r)?;
        let r = ctx.g.relu(r)?;
        let deltas = self.reg.forward(ctx, r)?;
        let (w, h) = (pyramid.image_width as f64, pyramid.image_height as f64);
        let boxes = apply_deltas(ctx, boxes, deltas, w, h)?;
        let d = ctx.g.data(boxes);
        let box_values = (0..box_values.len())
            .map(|i| Bbox::new(d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]))
            .collect();
        Ok(StageOutput {
            logits,
            boxes,
            box_values,
            queries: q,
        })
    }
}

/// Refines `[K, 4]` boxes by `[K, 4]` deltas `(dx, dy, dw, dh)`:
/// centres move by `dx·w`, sizes scale by `exp(dw)`; results are clipped.
pub fn apply_deltas(ctx: &mut Ctx<'_>, boxes: Var, deltas: Var, image_width: f64, image_height: f64) -> Result<Var> {
    let k = ctx.g.shape(boxes)[0];
    let g = &mut ctx.g;
    let col = |g: &mut crate::ndgrad::Graph, v: Var, i: usize| g.narrow(v, 1, i, 1);
    let (x1, y1, x2, y2) = (col(g, boxes, 0)?, col(g, boxes, 1)?, col(g, boxes, 2)?, col(g, boxes, 3)?);
    let (dx, dy, dw, dh) = (col(g, deltas, 0)?, col(g, deltas, 1)?, col(g, deltas, 2)?, col(g, deltas, 3)?);
    let mut axis = |lo: Var, hi: Var, d_pos: Var, d_size: Var| -> Result<(Var, Var)> {
        let size = g.sub(hi, lo)?;
        let size = g.clamp(size, MIN_BOX_SIZE, f64::MAX)?;
        let sum = g.add(lo, hi)?;
        let center = g.mul_scalar(sum, 0.5)?;
        let shift = g.mul(d_pos, size)?;
        let center = g.add(center, shift)?;
        let ds = g.clamp(d_size, -MAX_SCALE_DELTA, MAX_SCALE_DELTA)?;
        let scale = g.exp(ds)?;
        let size = g.mul(size, scale)?;
        let half = g.mul_scalar(size, 0.5)?;
        Ok((g.sub(center, half)?, g.add(center, half)?))
    };
    let (nx1, nx2) = axis(x1, x2, dx, dw)?;
    let (ny1, ny2) = axis(y1, y2, dy, dh)?;
    let out = g.concat(&[nx1, ny1, nx2, ny2], 1)?;
    clip_boxes(g, out, k, image_width, image_height)
}

fn clip_boxes(g: &mut crate::ndgrad::Graph, boxes: Var, k: usize, w: f64, h: f64) -> Result<Var> {
    let zeros = g.constant(Array::zeros(&[k, 4]));
    let bounds = g.constant(Array::new(&[k, 4], [w, h, w, h].repeat(k))?);
    let lower = g.maximum(boxes, zeros)?;
    Ok(g.minimum(lower, bounds)?)
}

/// Trainable queries and initial boxes used instead of generated ones.
#[derive(Clone, Debug)]
pub struct LearnableQueries {
    embedding: ParamId,
    /// `[K, 4]` as `(cx, cy, w, h)` relative to the image size.
    boxes: ParamId,
}

impl LearnableQueries {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, k: usize, d: usize) -> Self {
        let embedding = store.fan_in_uniform(rng, "head.learnable.embedding", &[k, d], 1, LINEAR_GAIN);
        let init: Vec<f64> = [0.5, 0.5, 1.0, 1.0].repeat(k);
        let boxes = store.add("head.learnable.boxes", Array::new(&[k, 4], init).expect("[K, 4]"));
        Self { embedding, boxes }
    }

    /// Query features `[K, d]`, boxes `[K, 4]` in pixels, and their values.
    pub fn initial(&self, ctx: &mut Ctx<'_>, image_width: f64, image_height: f64) -> Result<(Var, Var, Vec<Bbox>)> {
        let feats = ctx.p(self.embedding);
        let rel = ctx.p(self.boxes);
        let k = ctx.g.shape(rel)[0];
        let g = &mut ctx.g;
        let scale = g.constant(Array::new(&[k, 4], [image_width, image_height, image_width, image_height].repeat(k))?);
        let px = g.mul(rel, scale)?;
        let centers = g.narrow(px, 1, 0, 2)?;
        let sizes = g.narrow(px, 1, 2, 2)?;
        let sizes = g.abs(sizes)?;
        let half = g.mul_scalar(sizes, 0.5)?;
        let lo = g.sub(centers, half)?;
        let hi = g.add(centers, half)?;
        let xyxy = g.concat(&[lo, hi], 1)?;
        let boxes = clip_boxes(g, xyxy, k, image_width, image_height)?;
        let d = g.data(boxes);
        let values = (0..k)
            .map(|i| Bbox::new(d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]))
            .collect();
        Ok((feats, boxes, values))
    }
}

/// Independent stages applied in sequence.
#[derive(Clone, Debug)]
pub struct CascadeHead {
    pub stages: Vec<RcnnStage>,
}

impl CascadeHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &HeadConfig, n_stages: usize) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::Config("n_stages must be at least 1".into()));
        }
        let stages = (1..=n_stages)
            .map(|i| RcnnStage::new(store, rng, &format!("head.stage{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    /// Stage 1 consumes the initial queries and boxes; each later stage
    /// consumes the previous stage's queries and detached boxes.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        pyramid: &FeaturePyramid,
        queries: Var,
        boxes: Var,
        box_values: &[Bbox],
    ) -> Result<Vec<StageOutput>> {
        let mut outs: Vec<StageOutput> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = match outs.last() {
                None => stage.forward(ctx, pyramid, queries, boxes, box_values)?,
                Some(prev) => {
                    let b = ctx.g.detach(prev.boxes);
                    let (q, vals) = (prev.queries, prev.box_values.clone());
                    stage.forward(ctx, pyramid, q, b, &vals)?
                }
            };
            outs.push(out);
        }
        Ok(outs)
    }
}
