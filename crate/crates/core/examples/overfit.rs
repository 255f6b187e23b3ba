//! Trains on eight scenes until they are memorized.
//!
//! cargo run --release --example overfit -- 1000

use fqrcnn::dataeval::{generate_dataset, EvalReport, SceneSpec};
use fqrcnn::detector::{ModelConfig, TrainOptions, TrainState, Trainer};

fn main() -> fqrcnn::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let scenes = generate_dataset(&SceneSpec::default(), 8, 1)?;
    let data: Vec<_> = scenes.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
    let mut state = TrainState::new(&ModelConfig::default())?;
    let mut window = Vec::new();
    for target in (100..=steps).step_by(100) {
        let opts = TrainOptions { steps: target, ..TrainOptions::default() };
        Trainer::new(opts, &data)?.run(&mut state, |_, row| window.push(row.report.total))?;
        let report = EvalReport::evaluate(&state.model, &scenes)?;
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        println!("step {target:5} loss {mean:.4} ap50 {:.4} ap75 {:.4}", report.ap50, report.ap75);
        window.clear();
    }
    Ok(())
}
