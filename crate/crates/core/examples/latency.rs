//! Per-component latency as the cascade deepens.

use fqrcnn::dataeval::{bench_latency, generate_dataset, SceneSpec};
use fqrcnn::detector::{Model, ModelConfig, QueryMode};

fn main() -> fqrcnn::Result<()> {
    let images: Vec<_> = generate_dataset(&SceneSpec::default(), 8, 0)?.into_iter().map(|s| s.image).collect();
    for mode in [QueryMode::Featurized, QueryMode::Learnable] {
        for n_stages in [1, 2, 4, 6] {
            let model = Model::new(&ModelConfig { n_stages, mode, ..ModelConfig::default() })?;
            let l = bench_latency(&model, &images, 3, 20)?;
            println!(
                "{mode:?} stages {n_stages}: backbone {:.2} ms, queries {:.3} ms ({:.1}%), decoder {:.2} ms, total {:.2} ms",
                l.backbone.mean,
                l.query_generation.mean,
                100.0 * l.query_share(),
                l.decoder.mean,
                l.total.mean
            );
        }
    }
    Ok(())
}
