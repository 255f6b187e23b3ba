//! JSON Lines datasets with sibling binary PPM images.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::SceneAnnotation;
use crate::bbox::Bbox;
use crate::error::{Error, Result};
use crate::ndgrad::Array;

use super::Scene;

/// Index file written inside a dataset directory.
pub const INDEX_FILE: &str = "scenes.jsonl";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    width: usize,
    height: usize,
    image_ppm: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

/// Encodes a `[3, H, W]` image in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Array) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dataset(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * w * h);
    for p in 0..w * h {
        for c in 0..3 {
            out.push((d[c * w * h + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes binary PPM with maxval 255; comments in the header are skipped.
pub fn decode_ppm(bytes: &[u8]) -> Result<Array> {
    let bad = |m: &str| Error::Dataset(format!("malformed PPM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero extent"));
    }
    // exactly one whitespace byte separates header and raster
    let raster = &bytes[pos + 1..];
    if raster.len() != 3 * w * h {
        return Err(bad(&format!("expected {} raster bytes, found {}", 3 * w * h, raster.len())));
    }
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for c in 0..3 {
            data[c * w * h + p] = f64::from(raster[3 * p + c]) / 255.0;
        }
    }
    Ok(Array::new(&[3, h, w], data).expect("shape matches data"))
}

pub fn write_ppm(image: &Array, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Array> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes `scenes` into `dir` as `scenes.jsonl` plus one `<id>.ppm` each.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join(INDEX_FILE);
    let mut out = Vec::new();
    for s in scenes {
        let image_ppm = format!("{}.ppm", s.id);
        write_ppm(&s.image, &dir.join(&image_ppm))?;
        let rec = Record {
            id: s.id.clone(),
            width: s.width(),
            height: s.height(),
            image_ppm,
            boxes: s.annotation.boxes.iter().map(|b| b.to_array()).collect(),
            labels: s.annotation.labels.clone(),
        };
        serde_json::to_writer(&mut out, &rec).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    f.write_all(&out).map_err(|e| Error::io(&index, e))?;
    Ok(index)
}

/// Reads a dataset from its index file or from the directory holding it.
/// Image paths resolve relative to the index file.
pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let index = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
    let base = index.parent().unwrap_or(Path::new("."));
    let f = fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let mut scenes = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::Dataset(format!("{}:{}: {m}", index.display(), n + 1));
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let image = read_ppm(&base.join(&rec.image_ppm))?;
        if image.shape()[1] != rec.height || image.shape()[2] != rec.width {
            return Err(at(format!(
                "image is {}x{}, record says {}x{}",
                image.shape()[2],
                image.shape()[1],
                rec.width,
                rec.height
            )));
        }
        let annotation = SceneAnnotation {
            boxes: rec.boxes.iter().map(|&b| Bbox::from_array(b)).collect(),
            labels: rec.labels,
        };
        if annotation.boxes.len() != annotation.labels.len() {
            return Err(at("boxes and labels differ in length".into()));
        }
        scenes.push(Scene {
            id: rec.id,
            image,
            annotation,
        });
    }
    Ok(scenes)
}
