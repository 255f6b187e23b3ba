//! End-to-end detector: backbone and pyramid, query generation (or learnable
//! queries), cascade head, losses, training, inference and checkpoints.

mod checkpoint;
mod optim;
mod train;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{qgn_assign, qgn_loss, rcnn_set_loss, LossWeights, SceneAnnotation, StagePrediction};
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::head::{CascadeHead, HeadConfig, LearnableQueries, StageOutput};
use crate::ndgrad::{Array, Var};
use crate::params::{Ctx, ParamStore};
use crate::qgn::{select_queries, DenseSet, QueryGenerator, QuerySet};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use optim::{AdamW, OptimizerConfig};
pub use train::{LossReport, MetricsRow, TrainOptions, TrainState, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Queries gathered from dense predictions on the image.
    Featurized,
    /// Trainable embeddings and boxes shared by every image.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub d_model: usize,
    pub fpn_channels: usize,
    pub backbone_widths: [usize; 4],
    pub min_level: u8,
    pub max_level: u8,
    pub n_stages: usize,
    pub num_classes: usize,
    pub roi_size: usize,
    pub heads: usize,
    pub dynamic_dim: usize,
    pub ffn_dim: usize,
    /// Box side mapped to level 4 when pooling RoIs.
    pub canonical_size: f64,
    pub mode: QueryMode,
    pub use_roi_self_attention: bool,
    pub seed: u64,
    pub loss: LossWeights,
    /// Multiplier on the query-generation loss when added to the head losses.
    pub qgn_loss_weight: f64,
    pub optimizer: OptimizerConfig,
    /// Detections returned by inference; defaults to `num_queries`.
    pub report_top: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 20,
            d_model: 64,
            fpn_channels: 32,
            backbone_widths: [16, 32, 64, 64],
            min_level: 3,
            max_level: 7,
            n_stages: 2,
            num_classes: 3,
            roi_size: 7,
            heads: 4,
            dynamic_dim: 16,
            ffn_dim: 128,
            canonical_size: 32.0,
            mode: QueryMode::Featurized,
            use_roi_self_attention: true,
            seed: 0,
            loss: LossWeights::default(),
            qgn_loss_weight: 1.0,
            optimizer: OptimizerConfig::default(),
            report_top: None,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.backbone_widths,
            fpn_channels: self.fpn_channels,
            min_level: self.min_level,
            max_level: self.max_level,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            d_model: self.d_model,
            channels: self.fpn_channels,
            heads: self.heads,
            roi_size: self.roi_size,
            dynamic_dim: self.dynamic_dim,
            ffn_dim: self.ffn_dim,
            num_classes: self.num_classes,
            roi_self_attention: self.use_roi_self_attention,
            canonical_size: self.canonical_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        if self.n_stages == 0 {
            return Err(Error::Config("n_stages must be at least 1".into()));
        }
        if !(self.qgn_loss_weight.is_finite() && self.qgn_loss_weight >= 0.0) {
            return Err(Error::Config("qgn_loss_weight must be nonnegative".into()));
        }
        if self.report_top == Some(0) {
            return Err(Error::Config("report_top must be positive".into()));
        }
        self.backbone().validate()?;
        self.head().validate()?;
        self.loss.validate()?;
        self.optimizer.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// One scored box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub class: usize,
    pub score: f64,
}

/// Wall-clock split of one forward pass, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub backbone: f64,
    pub query_generation: f64,
    pub stages: Vec<f64>,
}

impl PhaseTimes {
    pub fn decoder(&self) -> f64 {
        self.stages.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.backbone + self.query_generation + self.decoder()
    }
}

/// Boxes entering one stage and, per query, the ground truth it was assigned.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMatch {
    pub inputs: Vec<Bbox>,
    pub sigma: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    /// Dense predictions (featurized mode only).
    pub dense: Option<DenseSet>,
    /// Selected queries (featurized mode only).
    pub queries: Option<QuerySet>,
    /// Boxes fed to the first stage.
    pub initial_boxes: Vec<Bbox>,
    pub stages: Vec<StageOutput>,
    pub times: PhaseTimes,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    qgn: Option<QueryGenerator>,
    learnable: Option<LearnableQueries>,
    head: CascadeHead,
}

impl Model {
    /// Parameters are drawn from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config.backbone(), &mut params, &mut rng)?;
        let (qgn, learnable) = match config.mode {
            QueryMode::Featurized => (
                Some(QueryGenerator::new(&mut params, &mut rng, config.fpn_channels, config.d_model)),
                None,
            ),
            QueryMode::Learnable => (
                None,
                Some(LearnableQueries::new(&mut params, &mut rng, config.num_queries, config.d_model)),
            ),
        };
        let head = CascadeHead::new(&mut params, &mut rng, &config.head(), config.n_stages)?;
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            qgn,
            learnable,
            head,
        })
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Full forward pass on a `[3, H, W]` image.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: &Array) -> Result<ForwardOutput> {
        let t0 = Instant::now();
        let img = ctx.g.constant(image.clone());
        let pyramid = self.backbone.extract_pyramid(ctx, img)?;
        let backbone_ms = ms_since(t0);

        let t1 = Instant::now();
        let (w, h) = (pyramid.image_width as f64, pyramid.image_height as f64);
        let (dense, queries, feats, boxes, values) = match (&self.qgn, &self.learnable) {
            (Some(qgn), _) => {
                let dense = qgn.dense_set(ctx, &pyramid)?;
                let qs = select_queries(ctx, &dense, self.config.num_queries)?;
                let (f, b, v) = (qs.features, qs.box_var, qs.boxes.clone());
                (Some(dense), Some(qs), f, b, v)
            }
            (None, Some(lq)) => {
                let (f, b, v) = lq.initial(ctx, w, h)?;
                (None, None, f, b, v)
            }
            (None, None) => unreachable!("a query source is always built"),
        };
        let query_ms = ms_since(t1);

        let mut stage_ms = Vec::with_capacity(self.head.stages.len());
        let mut stages: Vec<StageOutput> = Vec::with_capacity(self.head.stages.len());
        for stage in &self.head.stages {
            let t = Instant::now();
            let out = match stages.last() {
                None => stage.forward(ctx, &pyramid, feats, boxes, &values)?,
                Some(prev) => {
                    let b = ctx.g.detach(prev.boxes);
                    let vals = prev.box_values.clone();
                    stage.forward(ctx, &pyramid, prev.queries, b, &vals)?
                }
            };
            stage_ms.push(ms_since(t));
            stages.push(out);
        }
        Ok(ForwardOutput {
            pyramid,
            dense,
            queries,
            initial_boxes: values,
            stages,
            times: PhaseTimes {
                backbone: backbone_ms,
                query_generation: query_ms,
                stages: stage_ms,
            },
        })
    }

    /// Loss for one image: query-generation loss (featurized mode) plus the
    /// set loss of every stage.
    pub fn image_loss(&self, ctx: &mut Ctx<'_>, image: &Array, gt: &SceneAnnotation) -> Result<(Var, LossReport)> {
        let out = self.forward(ctx, image)?;
        let (w, h) = (out.pyramid.image_width as f64, out.pyramid.image_height as f64);
        let preds: Vec<StagePrediction> = out
            .stages
            .iter()
            .map(|s| StagePrediction {
                logits: s.logits,
                boxes: s.boxes,
            })
            .collect();
        let rcnn = rcnn_set_loss(&mut ctx.g, &preds, gt, w, h, &self.config.loss)?;
        let mut report = LossReport {
            total: 0.0,
            qgn: 0.0,
            stages: rcnn.per_stage.clone(),
            unassigned_gt: 0,
        };
        let total = match &out.dense {
            Some(dense) => {
                let probs = dense.probabilities(ctx);
                let boxes = dense.box_values(ctx);
                let centers: Vec<(f64, f64)> = dense.locations.iter().map(|l| l.center()).collect();
                let qa = qgn_assign(&probs, &boxes, &centers, gt, self.config.loss.matching)?;
                let ql = qgn_loss(&mut ctx.g, dense.logits, dense.boxes, &qa, gt, &self.config.loss)?;
                report.qgn = ctx.g.value(ql.total).item();
                report.unassigned_gt = qa.unassigned_gt;
                let weighted = ctx.g.mul_scalar(ql.total, self.config.qgn_loss_weight)?;
                ctx.g.add(weighted, rcnn.total)?
            }
            None => rcnn.total,
        };
        report.total = ctx.g.value(total).item();
        Ok((total, report))
    }

    /// Top-scoring `(query, class)` pairs of the last stage. No suppression.
    pub fn infer(&self, image: &Array) -> Result<Vec<Detection>> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward(&mut ctx, image)?;
        Ok(self.detections_from(&ctx, &out))
    }

    pub fn detections_from(&self, ctx: &Ctx<'_>, out: &ForwardOutput) -> Vec<Detection> {
        let last = out.stages.last().expect("at least one stage");
        let probs = last.class_probs(ctx);
        let c = self.config.num_classes;
        let k = last.box_values.len();
        let n = (k * c).min(self.config.report_top.unwrap_or(self.config.num_queries));
        top_scored(&probs, n)
            .into_iter()
            .map(|i| Detection {
                bbox: last.box_values[i / c],
                class: i % c,
                score: probs[i],
            })
            .collect()
    }

    /// Input boxes of every stage paired with the assignment that stage's
    /// predictions receive in the loss; index `i` of `sigma` is query `i`.
    pub fn stage_matches(&self, image: &Array, gt: &SceneAnnotation) -> Result<Vec<StageMatch>> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward(&mut ctx, image)?;
        let (w, h) = (out.pyramid.image_width as f64, out.pyramid.image_height as f64);
        let preds: Vec<StagePrediction> = out
            .stages
            .iter()
            .map(|s| StagePrediction {
                logits: s.logits,
                boxes: s.boxes,
            })
            .collect();
        let rcnn = rcnn_set_loss(&mut ctx.g, &preds, gt, w, h, &self.config.loss)?;
        let mut inputs = out.initial_boxes;
        let mut matches = Vec::with_capacity(out.stages.len());
        for (stage, a) in out.stages.iter().zip(rcnn.assignments) {
            let next = stage.box_values.clone();
            matches.push(StageMatch {
                inputs: std::mem::replace(&mut inputs, next),
                sigma: a.sigma,
            });
        }
        Ok(matches)
    }

    /// Proposal boxes in score order: selected queries in featurized mode,
    /// the learned initial boxes otherwise.
    pub fn proposals(&self, image: &Array) -> Result<Vec<Bbox>> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward(&mut ctx, image)?;
        Ok(out.initial_boxes)
    }
}

/// Indices of the `n` largest values, ties broken by index.
fn top_scored(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}
