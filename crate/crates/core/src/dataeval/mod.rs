//! Synthetic data, dataset files, detection metrics and analysis tools.

mod bench;
pub mod deltas;
mod io;
mod metrics;
mod overlay;
mod scene;

#[cfg(test)]
mod tests;

pub use bench::{bench_latency, LatencyBreakdown, Timing};
pub use deltas::{delta_distribution, DeltaHistogram};
pub use io::{decode_ppm, encode_ppm, read_dataset, read_ppm, write_dataset, write_ppm, INDEX_FILE};
pub use metrics::{
    ar_at_k, average_precision, coco_thresholds, match_detections, proposal_recall, recall_curve, EvalReport,
};
pub use overlay::{draw_overlay, render_overlay, Mark};
pub use scene::{generate_dataset, generate_scene, scene_seed, Generated, Scene, SceneSpec, SHAPES};
