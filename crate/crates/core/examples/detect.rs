//! Untrained inference: K detections straight from the last stage, no suppression.

use fqrcnn::dataeval::{generate_scene, SceneSpec};
use fqrcnn::detector::{Model, ModelConfig};

fn main() -> fqrcnn::Result<()> {
    let scene = generate_scene(1, &SceneSpec::default())?.scene;
    let model = Model::new(&ModelConfig::default())?;
    for d in model.infer(&scene.image)?.iter().take(5) {
        println!("class {} score {:.4} box {:?}", d.class, d.score, d.bbox.to_array());
    }
    Ok(())
}
