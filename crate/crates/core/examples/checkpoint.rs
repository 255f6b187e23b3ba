//! Save, reload and compare a training state bit for bit.

use fqrcnn::detector::{ModelConfig, TrainState};

fn main() -> fqrcnn::Result<()> {
    let state = TrainState::new(&ModelConfig::default())?;
    let path = std::env::temp_dir().join("fqrcnn-example.ckpt");
    state.save(&path)?;
    let back = TrainState::load(&path)?;
    let same = back.to_checkpoint().to_bytes() == std::fs::read(&path).map_err(|e| fqrcnn::Error::Io { path: path.clone(), source: e })?;
    println!("{} parameters, {} bytes, identical after reload: {same}", state.model.parameter_count(), state.to_checkpoint().to_bytes().len());
    Ok(())
}
