//! Training state, the optimization step and a deterministic batch sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::SceneAnnotation;
use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::ndgrad::Array;
use crate::params::{Ctx, ParamId};

use super::{read_checkpoint, write_checkpoint, AdamW, Checkpoint, Model, ModelConfig};

const STEP_KEY: &str = "__meta__/step";
const CONFIG_KEY: &str = "__meta__/config";
const OPT_T_KEY: &str = "__optim__/t";
const OPT_M_PREFIX: &str = "__optim__/m/";
const OPT_V_PREFIX: &str = "__optim__/v/";

/// Loss values of one step, averaged over the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub qgn: f64,
    pub stages: Vec<f64>,
    pub unassigned_gt: usize,
}

impl LossReport {
    fn describe(&self) -> String {
        let stages: Vec<String> = self.stages.iter().enumerate().map(|(i, v)| format!("stage{}={v}", i + 1)).collect();
        format!("total={} qgn={} {}", self.total, self.qgn, stages.join(" "))
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let optimizer = AdamW::new(config.optimizer, &model.params);
        Ok(Self {
            model,
            optimizer,
            step: 0,
        })
    }

    /// One forward, backward and AdamW update over `batch`. A non-finite loss
    /// or gradient aborts the step and leaves the state untouched.
    pub fn train_step(&mut self, batch: &[(&Array, &SceneAnnotation)]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut ctx = Ctx::training(&self.model.params);
        let mut report = LossReport::default();
        let mut total = None;
        for (image, gt) in batch {
            let (l, r) = self.model.image_loss(&mut ctx, image, gt)?;
            report.total += r.total * scale;
            report.qgn += r.qgn * scale;
            report.stages.resize(r.stages.len(), 0.0);
            report.stages.iter_mut().zip(&r.stages).for_each(|(a, b)| *a += b * scale);
            report.unassigned_gt += r.unassigned_gt;
            total = Some(match total {
                Some(t) => ctx.g.add(t, l)?,
                None => l,
            });
        }
        let loss = ctx.g.mul_scalar(total.expect("non-empty batch"), scale)?;
        if !ctx.g.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss(report.describe()));
        }
        ctx.g.backward(loss)?;
        let grads: Vec<(ParamId, Vec<f64>)> = ctx.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss(format!("non-finite gradient; {}", report.describe())));
        }
        drop(ctx);
        self.optimizer.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Array)> = self
            .model
            .params
            .iter()
            .map(|(n, a)| (n.to_string(), a.without_grad()))
            .collect();
        for (i, (n, a)) in self.model.params.iter().enumerate() {
            let shape = a.shape();
            tensors.push((format!("{OPT_M_PREFIX}{n}"), Array::new(shape, self.optimizer.m[i].clone()).expect("shape")));
            tensors.push((format!("{OPT_V_PREFIX}{n}"), Array::new(shape, self.optimizer.v[i].clone()).expect("shape")));
        }
        tensors.push((OPT_T_KEY.into(), Array::from_vec(vec![self.optimizer.t as f64])));
        tensors.push((STEP_KEY.into(), Array::from_vec(vec![self.step as f64])));
        let bytes: Vec<f64> = self.model.config.to_json().bytes().map(f64::from).collect();
        tensors.push((CONFIG_KEY.into(), Array::from_vec(bytes)));
        Checkpoint { tensors }
    }

    /// Configuration stored in a checkpoint.
    pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
        let raw = ckpt
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("missing configuration".into()))?;
        let bytes: Vec<u8> = raw.data().iter().map(|&b| b as u8).collect();
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("bad configuration: {e}")))
    }

    /// Rebuilds the state recorded in `ckpt`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = Self::checkpoint_config(ckpt)?;
        let mut state = Self::new(&config)?;
        state.restore(ckpt)?;
        Ok(state)
    }

    /// Loads parameters and optimizer state into a model built from `self`'s
    /// configuration; any name or shape difference is rejected with a report.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut diffs = Vec::new();
        let expected: Vec<(String, Vec<usize>)> =
            self.model.params.iter().map(|(n, a)| (n.to_string(), a.shape().to_vec())).collect();
        for (name, shape) in &expected {
            for key in [name.clone(), format!("{OPT_M_PREFIX}{name}"), format!("{OPT_V_PREFIX}{name}")] {
                match ckpt.get(&key) {
                    None => diffs.push(format!("missing {key} {shape:?}")),
                    Some(a) if a.shape() != shape.as_slice() => {
                        diffs.push(format!("{key}: expected {shape:?}, found {:?}", a.shape()))
                    }
                    Some(_) => {}
                }
            }
        }
        for (name, a) in &ckpt.tensors {
            let base = name
                .strip_prefix(OPT_M_PREFIX)
                .or_else(|| name.strip_prefix(OPT_V_PREFIX))
                .unwrap_or(name);
            if !name.starts_with("__meta__/") && name != OPT_T_KEY && self.model.params.id(base).is_none() {
                diffs.push(format!("unexpected {name} {:?}", a.shape()));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!("does not fit the model:\n  {}", diffs.join("\n  "))));
        }
        let scalar = |key: &str| -> Result<u64> {
            ckpt.get(key)
                .map(|a| a.data()[0] as u64)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
        };
        let step = scalar(STEP_KEY)?;
        let t = scalar(OPT_T_KEY)?;
        for (i, (name, _)) in expected.iter().enumerate() {
            let id = self.model.params.id(name).expect("present");
            let src = ckpt.get(name).expect("checked");
            self.model.params.get_mut(id).data_mut().copy_from_slice(src.data());
            self.optimizer.m[i].copy_from_slice(ckpt.get(&format!("{OPT_M_PREFIX}{name}")).expect("checked").data());
            self.optimizer.v[i].copy_from_slice(ckpt.get(&format!("{OPT_V_PREFIX}{name}")).expect("checked").data());
        }
        self.optimizer.t = t;
        self.step = step;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Run controls for a training loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    /// Seed of the batch order and augmentation.
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Learning rate is multiplied by 0.1 from this step on; `0` keeps it constant.
    pub lr_drop_step: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            seed: 0,
            flip: false,
            lr_drop_step: 0,
        }
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub report: LossReport,
}

impl MetricsRow {
    pub fn header(n_stages: usize) -> String {
        let mut h = "step,total_loss,qgn_loss".to_string();
        for i in 1..=n_stages {
            h.push_str(&format!(",stage{i}_loss"));
        }
        h
    }

    pub fn line(&self) -> String {
        let mut s = format!("{},{},{}", self.step, self.report.total, self.report.qgn);
        for v in &self.report.stages {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

/// Mirrors an image and its boxes left to right.
pub fn flip_horizontal(image: &Array, gt: &SceneAnnotation) -> (Array, SceneAnnotation) {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    let wf = w as f64;
    let boxes = gt.boxes.iter().map(|b| Bbox::new(wf - b.x2, b.y1, wf - b.x1, b.y2)).collect();
    (
        Array::new(s, out).expect("same shape"),
        SceneAnnotation {
            boxes,
            labels: gt.labels.clone(),
        },
    )
}

/// Drives [`TrainState::train_step`] over a fixed dataset. Batches depend only
/// on the options and the step index, so resumed runs see the same stream.
pub struct Trainer<'d> {
    pub options: TrainOptions,
    data: &'d [(Array, SceneAnnotation)],
}

impl<'d> Trainer<'d> {
    pub fn new(options: TrainOptions, data: &'d [(Array, SceneAnnotation)]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dataset("no scenes to train on".into()));
        }
        if options.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self { options, data })
    }

    /// Dataset indices and flip flags for `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<(usize, bool)> {
        let n = self.data.len() as u64;
        let bs = self.options.batch_size as u64;
        (0..bs)
            .map(|b| {
                let i = step * bs + b;
                let (epoch, pos) = (i / n, (i % n) as usize);
                let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut order: Vec<usize> = (0..self.data.len()).collect();
                order.shuffle(&mut rng);
                let mut flip_rng = ChaCha8Rng::seed_from_u64(self.options.seed.wrapping_add(i).wrapping_mul(0xD1B5_4A32_D192_ED03));
                (order[pos], self.options.flip && flip_rng.gen::<bool>())
            })
            .collect()
    }

    /// Runs until `state.step == options.steps`, calling `on_step` after
    /// every update.
    pub fn run(&self, state: &mut TrainState, mut on_step: impl FnMut(&TrainState, &MetricsRow)) -> Result<()> {
        let base_lr = state.model.config.optimizer.lr;
        while state.step < self.options.steps {
            let drop = self.options.lr_drop_step;
            state.optimizer.config.lr = if drop > 0 && state.step >= drop { base_lr * 0.1 } else { base_lr };
            let picks = self.batch_indices(state.step);
            let flipped: Vec<Option<(Array, SceneAnnotation)>> = picks
                .iter()
                .map(|&(i, f)| f.then(|| flip_horizontal(&self.data[i].0, &self.data[i].1)))
                .collect();
            let batch: Vec<(&Array, &SceneAnnotation)> = picks
                .iter()
                .zip(&flipped)
                .map(|(&(i, _), f)| match f {
                    Some((img, gt)) => (img, gt),
                    None => (&self.data[i].0, &self.data[i].1),
                })
                .collect();
            let report = state.train_step(&batch)?;
            let row = MetricsRow {
                step: state.step,
                report,
            };
            on_step(state, &row);
        }
        Ok(())
    }
}
