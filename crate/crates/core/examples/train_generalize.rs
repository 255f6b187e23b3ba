//! Trains on 500 scenes and reports held-out AP and proposal recall.
//!
//! cargo run --release --example train_generalize -- 3000

use fqrcnn::dataeval::{generate_dataset, proposal_recall, EvalReport, SceneSpec};
use fqrcnn::detector::{ModelConfig, TrainOptions, TrainState, Trainer};

fn main() -> fqrcnn::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let spec = SceneSpec::default();
    let train = generate_dataset(&spec, 500, 1)?;
    let test = generate_dataset(&spec, 100, 2)?;
    let data: Vec<_> = train.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
    let mut state = TrainState::new(&ModelConfig::default())?;
    for target in (500..=steps.max(500)).step_by(500) {
        let opts = TrainOptions { steps: target.min(steps), ..TrainOptions::default() };
        Trainer::new(opts, &data)?.run(&mut state, |_, _| {})?;
        let r = EvalReport::evaluate(&state.model, &test)?;
        let (curve, _) = proposal_recall(&state.model, &test, &[0.5])?;
        println!("step {:5} held-out ap50 {:.4} ap75 {:.4} map {:.4} recall@0.5 {:.4}", state.step, r.ap50, r.ap75, r.map, curve[0].1);
    }
    Ok(())
}
