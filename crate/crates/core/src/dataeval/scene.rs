//! Synthetic shape scenes with exact box annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::SceneAnnotation;
use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::ndgrad::Array;

/// Shapes by class id.
pub const SHAPES: [&str; 5] = ["rectangle", "ellipse", "triangle", "diamond", "cross"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Smallest and largest sampled box side, in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Amplitude of uniform additive noise.
    pub noise: f64,
    /// Placement attempts per object before it is dropped.
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 4,
            num_classes: 3,
            min_size: 10,
            max_size: 28,
            noise: 0.04,
            max_retries: 50,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > SHAPES.len() {
            return bad(format!("num_classes must be in 1..={}, got {}", SHAPES.len(), self.num_classes));
        }
        if self.min_objects > self.max_objects {
            return bad(format!("min_objects {} exceeds max_objects {}", self.min_objects, self.max_objects));
        }
        if self.min_size < 8 || self.min_size > self.max_size {
            return bad(format!("sizes must satisfy 8 <= min_size <= max_size, got {}..{}", self.min_size, self.max_size));
        }
        if self.max_size > self.width.min(self.height) {
            return bad(format!("max_size {} does not fit a {}x{} image", self.max_size, self.width, self.height));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise must be in [0, 0.5], got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `[3, H, W]`, every value a multiple of 1/255.
    pub image: Array,
    pub annotation: SceneAnnotation,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }
}

/// A generated scene plus how many requested objects could not be placed.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub scene: Scene,
    pub requested: usize,
    pub dropped: usize,
}

/// Whether the pixel centred at `(px, py)` lies in a shape drawn inside the
/// box `(x, y, w, h)`.
fn covers(class: usize, x: f64, y: f64, w: f64, h: f64, px: f64, py: f64) -> bool {
    let (u, v) = ((px - x) / w, (py - y) / h);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return false;
    }
    let (du, dv) = (u - 0.5, v - 0.5);
    match class {
        0 => true,
        1 => du * du + dv * dv <= 0.25,
        // apex at the top centre
        2 => du.abs() <= 0.5 * v,
        3 => du.abs() + dv.abs() <= 0.5,
        _ => du.abs() <= 0.17 || dv.abs() <= 0.17,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one scene. Objects never overlap (with a one pixel gap), so each
/// box tightly bounds exactly the pixels of its shape.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let requested = rng.gen_range(spec.min_objects..=spec.max_objects);
    let background: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.25));
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    let mut boxes: Vec<Bbox> = Vec::new();
    let mut labels = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();

    for _ in 0..requested {
        let class = rng.gen_range(0..spec.num_classes);
        for _ in 0..spec.max_retries {
            let bw = rng.gen_range(spec.min_size..=spec.max_size) as f64;
            let bh = rng.gen_range(spec.min_size..=spec.max_size) as f64;
            let x = rng.gen_range(0.0..=(w as f64 - bw));
            let y = rng.gen_range(0.0..=(h as f64 - bh));
            let mut pixels = Vec::new();
            let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
            for py in (y.floor() as usize)..((y + bh).ceil() as usize).min(h) {
                for px in (x.floor() as usize)..((x + bw).ceil() as usize).min(w) {
                    if covers(class, x, y, bw, bh, px as f64 + 0.5, py as f64 + 0.5) {
                        pixels.push(py * w + px);
                        (x1, y1, x2, y2) = (x1.min(px), y1.min(py), x2.max(px + 1), y2.max(py + 1));
                    }
                }
            }
            if pixels.is_empty() || x2 - x1 < 8 || y2 - y1 < 8 {
                continue;
            }
            let candidate = Bbox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64);
            let grown = Bbox::new(candidate.x1 - 1.0, candidate.y1 - 1.0, candidate.x2 + 1.0, candidate.y2 + 1.0);
            if boxes.iter().any(|b| b.intersection(&grown) > 0.0) {
                continue;
            }
            let id = boxes.len();
            pixels.iter().for_each(|&p| owner[p] = Some(id));
            // Bright enough to stand out against the darker background.
            colors.push(std::array::from_fn(|_| rng.gen_range(0.45..1.0)));
            boxes.push(candidate);
            labels.push(class);
            break;
        }
    }

    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            let base = owner[p].map_or(background[c], |o| colors[o][c]);
            let noise = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
            data[c * w * h + p] = quantize(base + noise);
        }
    }
    let dropped = requested - boxes.len();
    Ok(Generated {
        scene: Scene {
            id: format!("{seed:016x}"),
            image: Array::new(&[3, h, w], data).expect("shape matches data"),
            annotation: SceneAnnotation { boxes, labels },
        },
        requested,
        dropped,
    })
}

/// Seed of scene `index` within a dataset drawn from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

/// `count` scenes named by index.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let mut s = generate_scene(scene_seed(seed, i), spec)?.scene;
            s.id = format!("{i:06}");
            Ok(s)
        })
        .collect()
}
