//! Recall of the generated queries against IoU, and AR@K, after a short run.

use fqrcnn::dataeval::{ar_at_k, generate_dataset, proposal_recall, SceneSpec};
use fqrcnn::detector::{ModelConfig, TrainOptions, TrainState, Trainer};

fn main() -> fqrcnn::Result<()> {
    let spec = SceneSpec::default();
    let train = generate_dataset(&spec, 64, 5)?;
    let test = generate_dataset(&spec, 20, 6)?;
    let data: Vec<_> = train.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
    let mut state = TrainState::new(&ModelConfig::default())?;
    Trainer::new(TrainOptions { steps: 300, ..TrainOptions::default() }, &data)?.run(&mut state, |_, _| {})?;
    let grid: Vec<f64> = (1..=19).map(|i| f64::from(i) / 20.0).collect();
    let (curve, props) = proposal_recall(&state.model, &test, &grid)?;
    for (t, r) in curve {
        println!("iou {t:.2} recall {r:.3}");
    }
    let gts: Vec<_> = test.iter().map(|s| s.annotation.boxes.clone()).collect();
    for (k, ar) in ar_at_k(&props, &gts, &[1, 5, 10, 20]) {
        println!("AR@{k} {ar:.3}");
    }
    Ok(())
}
