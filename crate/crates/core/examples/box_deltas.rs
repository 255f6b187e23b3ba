//! How far each stage's input boxes sit from their assigned objects.

use fqrcnn::dataeval::{deltas, generate_dataset, SceneSpec};
use fqrcnn::detector::{ModelConfig, TrainOptions, TrainState, Trainer};

fn main() -> fqrcnn::Result<()> {
    let scenes = generate_dataset(&SceneSpec::default(), 32, 9)?;
    let data: Vec<_> = scenes.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
    let mut state = TrainState::new(&ModelConfig { n_stages: 3, ..ModelConfig::default() })?;
    Trainer::new(TrainOptions { steps: 300, ..TrainOptions::default() }, &data)?.run(&mut state, |_, _| {})?;
    for (i, h) in deltas::delta_distribution(&state.model, &scenes)?.iter().enumerate() {
        println!(
            "stage {}: mean |dx| {:.4} |dy| {:.4}, centre-bin share {:.3}",
            i + 1,
            h.mean_abs_dx,
            h.mean_abs_dy,
            h.count_at(20, 20) as f64 / h.matched.max(1) as f64
        );
    }
    Ok(())
}
