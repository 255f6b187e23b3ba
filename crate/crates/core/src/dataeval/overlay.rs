//! Box outlines and score labels drawn onto scene images.

use std::path::Path;

use crate::bbox::Bbox;
use crate::error::Result;
use crate::ndgrad::Array;

use super::io::write_ppm;

/// Outline colours cycled by class.
const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.3, 1.0],
    [0.2, 1.0, 1.0],
];

/// 3x5 digit glyphs, one row per `u8`, low three bits used.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

/// A box to draw, with an optional score printed as two digits (percent).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mark {
    pub bbox: Bbox,
    pub class: usize,
    pub score: Option<f64>,
}

fn put(data: &mut [f64], w: usize, h: usize, x: i64, y: i64, color: [f64; 3]) {
    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
        return;
    }
    let p = y as usize * w + x as usize;
    for (c, v) in color.iter().enumerate() {
        data[c * w * h + p] = *v;
    }
}

/// Copy of `image` with every mark drawn as a 1 px outline on the outermost
/// pixels the box covers, plus its score above the top-left corner.
pub fn draw_overlay(image: &Array, marks: &[Mark]) -> Array {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut data = image.data().to_vec();
    for m in marks {
        let color = PALETTE[m.class % PALETTE.len()];
        let b = m.bbox.clip(w as f64, h as f64);
        let x1 = b.x1.floor() as i64;
        let y1 = b.y1.floor() as i64;
        let x2 = (b.x2.ceil() as i64 - 1).max(x1);
        let y2 = (b.y2.ceil() as i64 - 1).max(y1);
        for x in x1..=x2 {
            put(&mut data, w, h, x, y1, color);
            put(&mut data, w, h, x, y2, color);
        }
        for y in y1..=y2 {
            put(&mut data, w, h, x1, y, color);
            put(&mut data, w, h, x2, y, color);
        }
        if let Some(s) = m.score {
            let pct = (s.clamp(0.0, 0.99) * 100.0).floor() as usize;
            let top = if y1 >= 6 { y1 - 6 } else { y1 + 2 };
            for (k, d) in [pct / 10, pct % 10].into_iter().enumerate() {
                for (r, bits) in DIGITS[d].iter().enumerate() {
                    for col in 0..3 {
                        if bits >> (2 - col) & 1 == 1 {
                            put(&mut data, w, h, x1 + 1 + 4 * k as i64 + col, top + r as i64, color);
                        }
                    }
                }
            }
        }
    }
    Array::new(image.shape(), data).expect("same shape")
}

pub fn render_overlay(image: &Array, marks: &[Mark], path: &Path) -> Result<()> {
    write_ppm(&draw_overlay(image, marks), path)
}
