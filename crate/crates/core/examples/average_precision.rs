//! AP on a hand-built ranking: hit, miss, hit over two objects.

use fqrcnn::dataeval::{average_precision, match_detections};
use fqrcnn::Bbox;

fn main() {
    let gts = vec![vec![Bbox::new(0.0, 0.0, 10.0, 10.0), Bbox::new(20.0, 20.0, 30.0, 30.0)]];
    let dets = vec![vec![
        (Bbox::new(0.0, 0.0, 10.0, 10.0), 0.9),
        (Bbox::new(40.0, 40.0, 50.0, 50.0), 0.8),
        (Bbox::new(21.0, 20.0, 31.0, 30.0), 0.7),
    ]];
    for (score, tp) in match_detections(&dets, &gts, 0.5) {
        println!("score {score:.1} {}", if tp { "TP" } else { "FP" });
    }
    // recall 0.5 at precision 1, then recall 1 at precision 2/3
    println!("AP@0.5 = {:.4}", average_precision(&dets, &gts, 0.5));
    println!("AP@0.9 = {:.4}", average_precision(&dets, &gts, 0.9));
}
