//! Writes a small synthetic dataset plus ground-truth overlays.
//!
//! cargo run --release --example generate_scenes -- /tmp/shapes

use std::path::PathBuf;

use fqrcnn::dataeval::{generate_dataset, render_overlay, write_dataset, Mark, SceneSpec};

fn main() -> fqrcnn::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fqrcnn-shapes"));
    let spec = SceneSpec::default();
    let scenes = generate_dataset(&spec, 12, 42)?;
    let index = write_dataset(&dir, &scenes)?;
    for s in &scenes {
        let marks: Vec<Mark> = s
            .annotation
            .boxes
            .iter()
            .zip(&s.annotation.labels)
            .map(|(&bbox, &class)| Mark { bbox, class, score: None })
            .collect();
        render_overlay(&s.image, &marks, &dir.join(format!("{}-gt.ppm", s.id)))?;
        println!("{}: {} objects {:?}", s.id, s.annotation.boxes.len(), s.annotation.labels);
    }
    println!("index at {}", index.display());
    Ok(())
}
