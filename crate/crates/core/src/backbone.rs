//! Small convolutional backbone with a feature pyramid on top.
//!
//! Four `conv3x3 → relu → maxpool` stages reach stride 16; one more pool gives
//! the stride-32 map. Lateral 1×1 convolutions, nearest-neighbour top-down
//! merging and 3×3 smoothing produce P3–P5, and stride-2 3×3 convolutions
//! extend the pyramid to P6 and P7.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Var;
use crate::params::{Ctx, ParamId, ParamStore};

pub const MIN_LEVEL: u8 = 3;
pub const MAX_LEVEL: u8 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub fpn_channels: usize,
    pub min_level: u8,
    pub max_level: u8,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 64],
            fpn_channels: 32,
            min_level: 3,
            max_level: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_LEVEL <= self.min_level
            && self.min_level <= self.max_level
            && self.max_level <= MAX_LEVEL)
        {
            return Err(Error::Config(format!(
                "pyramid levels {}..{} must lie within {MIN_LEVEL}..{MAX_LEVEL}",
                self.min_level, self.max_level
            )));
        }
        if self.widths.contains(&0) || self.fpn_channels == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> impl Iterator<Item = u8> {
        self.min_level..=self.max_level
    }
}

/// One pyramid level: a `[C, H_l, W_l]` map at stride `2^level`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLevel {
    pub level: u8,
    pub stride: usize,
    pub map: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl FeaturePyramid {
    pub fn level(&self, level: u8) -> Option<&FeatureLevel> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn min_level(&self) -> u8 {
        self.levels[0].level
    }

    pub fn max_level(&self) -> u8 {
        self.levels[self.levels.len() - 1].level
    }
}

/// Spatial extent of level `level` for an input extent `n`.
pub fn level_extent(n: usize, level: u8) -> usize {
    n.div_ceil(1 << level)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let w = store.fan_in_uniform(rng, format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, gain);
        let b = store.constant(format!("{name}.bias"), &[cout], 0.0);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        Ok(ctx.g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

/// Gain for layers followed by a relu.
pub(crate) const RELU_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)
/// Gain for layers with a linear output.
pub(crate) const LINEAR_GAIN: f64 = 1.732_050_807_568_877_2; // sqrt(3)

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Conv>,
    laterals: Vec<Conv>,
    smooth: Vec<Conv>,
    p6: Option<Conv>,
    p7: Option<Conv>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.fpn_channels;
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Conv::new(store, rng, &format!("backbone.stage{}", i + 1), cin, w, 3, 1, RELU_GAIN));
            cin = w;
        }
        // Inputs to the laterals: stage 3 (stride 8), stage 4 (stride 16) and
        // the pooled stage 4 (stride 32).
        let lateral_in = [config.widths[2], config.widths[3], config.widths[3]];
        let laterals = (3..=5)
            .zip(lateral_in)
            .map(|(l, cin)| Conv::new(store, rng, &format!("fpn.lateral{l}"), cin, c, 1, 1, LINEAR_GAIN))
            .collect();
        let smooth = (3..=5)
            .map(|l| Conv::new(store, rng, &format!("fpn.smooth{l}"), c, c, 3, 1, LINEAR_GAIN))
            .collect();
        let p6 = (config.max_level >= 6).then(|| Conv::new(store, rng, "fpn.p6", c, c, 3, 2, LINEAR_GAIN));
        let p7 = (config.max_level >= 7).then(|| Conv::new(store, rng, "fpn.p7", c, c, 3, 2, LINEAR_GAIN));
        Ok(Self {
            config: config.clone(),
            stages,
            laterals,
            smooth,
            p6,
            p7,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the backbone and FPN on a `[3, H, W]` image with values in `[0, 1]`.
    pub fn extract_pyramid(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<FeaturePyramid> {
        let shape = ctx.g.shape(image).to_vec();
        let [3, h, w] = shape.as_slice() else {
            return Err(Error::Config(format!("expected a [3, H, W] image, got {shape:?}")));
        };
        let (h, w) = (*h, *w);
        let centered = ctx.g.add_scalar(image, -0.5)?;
        let mut x = ctx.g.mul_scalar(centered, 4.0)?;
        let mut feats = Vec::new();
        for conv in &self.stages {
            let y = conv.forward(ctx, x)?;
            let y = ctx.g.relu(y)?;
            x = ctx.g.max_pool2(y)?;
            feats.push(x);
        }
        let c5 = ctx.g.max_pool2(x)?;
        let inputs = [feats[2], feats[3], c5];

        let mut tops: [Option<Var>; 3] = [None; 3];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(ctx, inputs[i])?;
            tops[i] = Some(match tops.get(i + 1).copied().flatten() {
                Some(above) => {
                    let s = ctx.g.shape(lat).to_vec();
                    let up = ctx.g.upsample_nearest(above, s[1], s[2])?;
                    ctx.g.add(lat, up)?
                }
                None => lat,
            });
        }
        let mut maps = Vec::new();
        for i in 0..3 {
            maps.push(self.smooth[i].forward(ctx, tops[i].unwrap())?);
        }
        if let Some(p6) = &self.p6 {
            maps.push(p6.forward(ctx, maps[2])?);
        }
        if let Some(p7) = &self.p7 {
            let r = ctx.g.relu(maps[3])?;
            maps.push(p7.forward(ctx, r)?);
        }

        let levels = self
            .config
            .levels()
            .map(|level| {
                let map = maps[(level - 3) as usize];
                let s = ctx.g.shape(map);
                FeatureLevel {
                    level,
                    stride: 1 << level,
                    map,
                    height: s[1],
                    width: s[2],
                }
            })
            .collect();
        Ok(FeaturePyramid {
            levels,
            channels: self.config.fpn_channels,
            image_height: h,
            image_width: w,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::ndgrad::Array;
    use crate::params::param_grad_check;

    fn build(config: &BackboneConfig, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(config, &mut store, &mut rng).unwrap();
        (store, bb)
    }

    fn image(h: usize, w: usize, seed: u64) -> Array {
        crate::ndgrad::suite::random_array(&mut ChaCha8Rng::seed_from_u64(seed), &[3, h, w], 0.0, 1.0)
    }

    #[test]
    fn pyramid_extents_for_64px() {
        let (store, bb) = build(&BackboneConfig::default(), 0);
        let mut ctx = Ctx::inference(&store);
        let img = ctx.g.constant(image(64, 64, 1));
        let pyr = bb.extract_pyramid(&mut ctx, img).unwrap();
        let sizes: Vec<_> = pyr.levels.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(sizes, vec![(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)]);
        for l in &pyr.levels {
            assert_eq!(ctx.g.shape(l.map), &[32, l.height, l.width]);
            assert_eq!(l.stride, 1 << l.level);
        }
    }

    #[test]
    fn zero_image_with_zero_weights_gives_zero_pyramid() {
        let (mut store, bb) = build(&BackboneConfig::default(), 0);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut ctx = Ctx::inference(&store);
        let img = ctx.g.constant(Array::full(&[3, 64, 64], 0.5));
        let pyr = bb.extract_pyramid(&mut ctx, img).unwrap();
        for l in &pyr.levels {
            assert!(ctx.g.data(l.map).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let (store, bb) = build(&BackboneConfig::default(), 42);
            let mut ctx = Ctx::inference(&store);
            let img = ctx.g.constant(image(64, 64, 3));
            let pyr = bb.extract_pyramid(&mut ctx, img).unwrap();
            pyr.levels
                .iter()
                .flat_map(|l| ctx.g.data(l.map).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_rgb_input() {
        let (store, bb) = build(&BackboneConfig::default(), 0);
        let mut ctx = Ctx::inference(&store);
        let img = ctx.g.constant(Array::zeros(&[1, 64, 64]));
        assert!(bb.extract_pyramid(&mut ctx, img).is_err());
    }

    #[test]
    fn configurable_level_range() {
        let cfg = BackboneConfig {
            min_level: 4,
            max_level: 6,
            ..Default::default()
        };
        let (store, bb) = build(&cfg, 0);
        assert!(store.id("fpn.p7.weight").is_none());
        let mut ctx = Ctx::inference(&store);
        let img = ctx.g.constant(image(64, 64, 1));
        let pyr = bb.extract_pyramid(&mut ctx, img).unwrap();
        let levels: Vec<_> = pyr.levels.iter().map(|l| l.level).collect();
        assert_eq!(levels, vec![4, 5, 6]);
        assert!(BackboneConfig { min_level: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn gradient_reaches_stage_one_weights() {
        let cfg = BackboneConfig {
            widths: [4, 4, 4, 4],
            fpn_channels: 4,
            ..Default::default()
        };
        let (store, bb) = build(&cfg, 7);
        let img = image(32, 32, 8);
        let stage1 = store.id("backbone.stage1.weight").unwrap();
        for level in [3u8, 4, 7] {
            let err = param_grad_check(&store, stage1, 1e-6, |ctx| {
                let x = ctx.g.constant(img.clone());
                let pyr = bb.extract_pyramid(ctx, x)?;
                let map = pyr.level(level).unwrap().map;
                let sq = ctx.g.mul(map, map)?;
                Ok(ctx.g.sum(sq)?)
            })
            .unwrap();
            assert!(err <= 1e-5, "P{level}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn extents_follow_stride_rule(h in 32usize..=256, w in 32usize..=256) {
            let (store, bb) = build(&BackboneConfig { widths: [2, 2, 2, 2], fpn_channels: 2, ..Default::default() }, 1);
            let mut ctx = Ctx::inference(&store);
            let img = ctx.g.constant(Array::full(&[3, h, w], 0.3));
            let pyr = bb.extract_pyramid(&mut ctx, img).unwrap();
            for l in &pyr.levels {
                prop_assert_eq!(l.height, level_extent(h, l.level));
                prop_assert_eq!(l.width, level_extent(w, l.level));
            }
        }
    }
}
