//! Acceptance suite: one PASS/FAIL line per criterion A1..A11.
//!
//! cargo test --release --test acceptance            (all criteria)
//! cargo test --release --test acceptance -- A2 A9   (a subset)

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use fqrcnn::assignment::{brute_force_min, giou, hungarian, match_quality, MatchQualityParams};
use fqrcnn::backbone::Backbone;
use fqrcnn::dataeval::{
    ar_at_k, average_precision, bench_latency, generate_dataset, proposal_recall, recall_curve, write_dataset,
    EvalReport, Scene, SceneSpec,
};
use fqrcnn::detector::{Model, ModelConfig, QueryMode, TrainOptions, TrainState, Trainer};
use fqrcnn::gradcheck::{full_suite, TOLERANCE};
use fqrcnn::head::CascadeHead;
use fqrcnn::ndgrad::suite::random_array;
use fqrcnn::ndgrad::{Array, Graph};
use fqrcnn::params::{Ctx, ParamStore};
use fqrcnn::Bbox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion parameters.
const GRAD_SEEDS: usize = 20;
const GRAD_SECONDS: f64 = 120.0;
const HUNGARIAN_TRIALS: usize = 200;
const HUNGARIAN_MAX: usize = 7;
const HUNGARIAN_SECONDS: f64 = 10.0;
const OVERFIT_SCENES: usize = 8;
const OVERFIT_MAX_STEPS: u64 = 5000;
const OVERFIT_EVAL_EVERY: u64 = 250;
const OVERFIT_AP50: f64 = 0.99;
const TRAIN_SCENES: usize = 500;
const TEST_SCENES: usize = 100;
const RECIPE_STEPS: u64 = 3000;
const GENERALIZE_AP50: f64 = 0.70;
const QUERY_GAP: f64 = 0.05;
const DECODER_RATIO: (f64, f64) = (4.5, 7.5);
const QUERY_SHARE_MAX: f64 = 0.25;
const QGN_RECALL50: f64 = 0.90;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Trained models of the shared recipe, keyed by (mode, stages).
struct Bench {
    train: Vec<Scene>,
    test: Vec<Scene>,
    runs: HashMap<(bool, usize), (Model, EvalReport, f64)>,
}

impl Bench {
    fn new() -> Self {
        let spec = SceneSpec::default();
        Self {
            train: generate_dataset(&spec, TRAIN_SCENES, 1).expect("train split"),
            test: generate_dataset(&spec, TEST_SCENES, 2).expect("test split"),
            runs: HashMap::new(),
        }
    }

    /// Model, held-out report and training seconds.
    fn run(&mut self, mode: QueryMode, n_stages: usize) -> &(Model, EvalReport, f64) {
        let key = (mode == QueryMode::Featurized, n_stages);
        if !self.runs.contains_key(&key) {
            let t = Instant::now();
            let data: Vec<_> = self.train.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
            let cfg = ModelConfig { mode, n_stages, ..ModelConfig::default() };
            let mut state = TrainState::new(&cfg).expect("config");
            let opts = TrainOptions { steps: RECIPE_STEPS, ..TrainOptions::default() };
            Trainer::new(opts, &data).expect("data").run(&mut state, |_, _| {}).expect("training");
            let report = EvalReport::evaluate(&state.model, &self.test).expect("eval");
            let secs = t.elapsed().as_secs_f64();
            eprintln!("    trained {mode:?} x{n_stages}: held-out AP50 {:.4} in {secs:.0}s", report.ap50);
            self.runs.insert(key, (state.model, report, secs));
        }
        &self.runs[&key]
    }

    fn ap50(&mut self, mode: QueryMode, n_stages: usize) -> f64 {
        self.run(mode, n_stages).1.ap50
    }
}

fn a1() -> Outcome {
    let t = Instant::now();
    let reports = full_suite(GRAD_SEEDS).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).expect("non-empty");
    let failing: Vec<&str> = reports.iter().filter(|r| r.max_error > TOLERANCE).map(|r| r.name).collect();
    let composed = ["qgn_loss", "rcnn_set_loss", "image_loss"].iter().all(|n| reports.iter().any(|r| r.name == *n));
    outcome(
        failing.is_empty() && composed && secs <= GRAD_SECONDS,
        format!(
            "{} checks x {GRAD_SEEDS} seeds, worst {} {:.2e} <= {TOLERANCE:e}, failing {failing:?}, {secs:.1}s <= {GRAD_SECONDS}s",
            reports.len(),
            worst.name,
            worst.max_error
        ),
    )
}

fn a2() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..HUNGARIAN_TRIALS {
        let (n, m) = (rng.gen_range(1..=HUNGARIAN_MAX), rng.gen_range(1..=HUNGARIAN_MAX));
        // Dyadic costs keep every partial sum exact, so equality is bitwise.
        let cost: Vec<f64> = (0..n * m).map(|_| f64::from(rng.gen_range(0..4096u32)) / 256.0).collect();
        let a = hungarian(&cost, n, m).expect("finite costs");
        if a.total_cost != brute_force_min(&cost, n, m) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs <= HUNGARIAN_SECONDS,
        format!("{HUNGARIAN_TRIALS} matrices up to {HUNGARIAN_MAX}x{HUNGARIAN_MAX}, {mismatches} mismatches, {secs:.2}s"),
    )
}

fn a3() -> Outcome {
    let t = Instant::now();
    let scenes = generate_dataset(&SceneSpec::default(), OVERFIT_SCENES, 1).expect("scenes");
    let data: Vec<_> = scenes.iter().map(|s| (s.image.clone(), s.annotation.clone())).collect();
    let cfg = ModelConfig::default();
    let mut state = TrainState::new(&cfg).expect("config");
    let mut ap50 = 0.0;
    while state.step < OVERFIT_MAX_STEPS {
        let opts = TrainOptions { steps: state.step + OVERFIT_EVAL_EVERY, ..TrainOptions::default() };
        Trainer::new(opts, &data).expect("data").run(&mut state, |_, _| {}).expect("training");
        ap50 = EvalReport::evaluate(&state.model, &scenes).expect("eval").ap50;
        if ap50 >= OVERFIT_AP50 {
            break;
        }
    }
    outcome(
        ap50 >= OVERFIT_AP50,
        format!(
            "AP50 {ap50:.4} >= {OVERFIT_AP50} on the {OVERFIT_SCENES} training scenes after {} steps (K={}, {} stages), {:.0}s",
            state.step,
            cfg.num_queries,
            cfg.n_stages,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn a4(b: &mut Bench) -> Outcome {
    let (_, r, secs) = b.run(QueryMode::Featurized, 2);
    outcome(
        r.ap50 >= GENERALIZE_AP50,
        format!(
            "held-out AP50 {:.4} >= {GENERALIZE_AP50} (AP75 {:.4}, mAP {:.4}; {TRAIN_SCENES} train / {TEST_SCENES} test, {RECIPE_STEPS} steps, {secs:.0}s)",
            r.ap50, r.ap75, r.map
        ),
    )
}

fn a5(b: &mut Bench) -> Outcome {
    let f1 = b.ap50(QueryMode::Featurized, 1);
    let l1 = b.ap50(QueryMode::Learnable, 1);
    let f2 = b.ap50(QueryMode::Featurized, 2);
    let l6 = b.ap50(QueryMode::Learnable, 6);
    let gap = f1 - l1;
    outcome(
        gap >= QUERY_GAP && l6 >= f2 - QUERY_GAP,
        format!(
            "1 stage: featurized {f1:.4} - learnable {l1:.4} = {gap:.4} >= {QUERY_GAP}; learnable x6 {l6:.4} >= featurized x2 {f2:.4} - {QUERY_GAP}"
        ),
    )
}

fn a6(b: &mut Bench) -> Outcome {
    let f1 = b.ap50(QueryMode::Featurized, 1);
    let f2 = b.ap50(QueryMode::Featurized, 2);
    let f4 = b.ap50(QueryMode::Featurized, 4);
    let (early, late) = (f2 - f1, f4 - f2);
    outcome(
        late <= early,
        format!("AP50 x1 {f1:.4}, x2 {f2:.4}, x4 {f4:.4}: gain 2->4 {late:.4} <= gain 1->2 {early:.4}"),
    )
}

fn a7(b: &Bench) -> Outcome {
    let images: Vec<Array> = b.test.iter().take(8).map(|s| s.image.clone()).collect();
    let lat = |n_stages| {
        let model = Model::new(&ModelConfig { n_stages, ..ModelConfig::default() }).expect("config");
        bench_latency(&model, &images, 5, 30).expect("bench")
    };
    let one = lat(1);
    let six = lat(6);
    let default = lat(ModelConfig::default().n_stages);
    let ratio = six.decoder.mean / one.decoder.mean;
    let share = default.query_share();
    outcome(
        (DECODER_RATIO.0..=DECODER_RATIO.1).contains(&ratio) && default.query_generation.mean > 0.0 && share < QUERY_SHARE_MAX,
        format!(
            "decoder x6 {:.2} ms / x1 {:.2} ms = {ratio:.2} in [{}, {}]; query generation {:.3} ms = {:.1}% of {:.2} ms total (< {}%)",
            six.decoder.mean,
            one.decoder.mean,
            DECODER_RATIO.0,
            DECODER_RATIO.1,
            default.query_generation.mean,
            100.0 * share,
            default.total.mean,
            100.0 * QUERY_SHARE_MAX
        ),
    )
}

fn a8(b: &mut Bench) -> Outcome {
    // Oracle fixtures: three objects whose best proposals have IoU 0.9, 0.6 and 0.3.
    let gts = vec![vec![
        Bbox::new(0.0, 0.0, 10.0, 10.0),
        Bbox::new(20.0, 0.0, 30.0, 10.0),
        Bbox::new(40.0, 0.0, 50.0, 10.0),
    ]];
    let props = vec![vec![
        Bbox::new(0.0, 0.0, 10.0, 9.0),
        Bbox::new(20.0, 0.0, 30.0, 6.0),
        Bbox::new(40.0, 0.0, 50.0, 3.0),
    ]];
    let grid = [0.25, 0.5, 0.6, 0.75, 0.95];
    let ious = [0.9, 0.6, 0.3];
    let oracle = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / 3.0;
    let curve_ok = recall_curve(&props, &gts, &grid).iter().all(|&(t, r)| r == oracle(t))
        && recall_curve(&gts, &gts, &grid).iter().all(|&(_, r)| r == 1.0)
        && recall_curve(&[vec![]], &gts, &grid).iter().all(|&(_, r)| r == 0.0);
    let coco: Vec<f64> = (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect();
    let ar_oracle = |k: usize| coco.iter().map(|&t| ious[..k].iter().filter(|&&v| v >= t).count() as f64 / 3.0).sum::<f64>() / 10.0;
    let ar_ok = ar_at_k(&props, &gts, &[0, 1, 2, 3]).iter().all(|&(k, v)| (v - ar_oracle(k)).abs() < 1e-15);

    let test = b.test.clone();
    let (model, _, _) = b.run(QueryMode::Featurized, 2);
    let (curve, _) = proposal_recall(model, &test, &[0.5]).expect("recall");
    let recall = curve[0].1;
    outcome(
        curve_ok && ar_ok && recall >= QGN_RECALL50,
        format!(
            "fixtures: curve {} AR@K {}; held-out top-{} proposal recall@0.5 {recall:.4} >= {QGN_RECALL50}",
            if curve_ok { "exact" } else { "MISMATCH" },
            if ar_ok { "exact" } else { "MISMATCH" },
            model.config.num_queries
        ),
    )
}

/// Best precision over every prefix reaching each recall step, averaged.
fn rank_walk(flags: &[bool], n_gt: usize) -> f64 {
    let mut tp = vec![0usize];
    for &f in flags {
        tp.push(tp.last().unwrap() + usize::from(f));
    }
    (1..=n_gt)
        .map(|k| {
            (1..tp.len()).filter(|&n| tp[n] >= k).map(|n| tp[n] as f64 / n as f64).fold(0.0, f64::max) / n_gt as f64
        })
        .sum()
}

fn a9() -> Outcome {
    // Two objects; a pool of detections that hit object 0, hit object 1,
    // duplicate object 0 at lower IoU, or miss. Every ordered selection of up
    // to five is scored in descending position order.
    let gts = vec![Bbox::new(0.0, 0.0, 10.0, 10.0), Bbox::new(20.0, 20.0, 30.0, 30.0)];
    let pool = [
        Bbox::new(0.0, 0.0, 10.0, 10.0),
        Bbox::new(20.0, 20.0, 30.0, 30.0),
        Bbox::new(1.0, 0.0, 11.0, 10.0),
        Bbox::new(40.0, 40.0, 50.0, 50.0),
    ];
    let mut fixtures = 0;
    let mut worst = 0.0f64;
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    for len in 0..=5 {
        for seq in seqs.iter().filter(|s| s.len() == len) {
            let dets: Vec<(Bbox, f64)> = seq.iter().enumerate().map(|(i, &p)| (pool[p], 1.0 - 0.1 * i as f64)).collect();
            let ap = average_precision(&[dets.clone()], &[gts.clone()], 0.5);
            // Oracle matching: walk in rank order, claim the best unclaimed object.
            let mut claimed = [false; 2];
            let flags: Vec<bool> = dets
                .iter()
                .map(|(b, _)| {
                    let best = (0..2)
                        .filter(|&k| !claimed[k] && b.iou(&gts[k]) >= 0.5)
                        .max_by(|&x, &y| b.iou(&gts[x]).total_cmp(&b.iou(&gts[y])));
                    if let Some(k) = best {
                        claimed[k] = true;
                    }
                    best.is_some()
                })
                .collect();
            worst = worst.max((ap - rank_walk(&flags, 2)).abs());
            fixtures += 1;
        }
        seqs = seqs
            .iter()
            .flat_map(|s| (0..pool.len()).map(move |p| [s.clone(), vec![p]].concat()))
            .collect();
    }
    let hand = average_precision(&[vec![(pool[0], 0.9), (pool[3], 0.8), (pool[1], 0.7)]], &[gts.clone()], 0.5);
    let hand_ok = (hand - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15 && (hand - 0.8333).abs() < 1e-4;
    outcome(
        worst < 1e-12 && hand_ok,
        format!("{fixtures} fixtures with <= 5 detections, max |AP - oracle| {worst:.1e}; TP,FP,TP case {hand:.4}"),
    )
}

fn train_via_cli(dir: &Path, out: &str) -> (Vec<u8>, Vec<u8>) {
    let config = dir.join(format!("{out}.json"));
    let cfg = serde_json::json!({
        "dataset": dir.join("data"),
        "output_dir": dir.join(out),
        "steps": 12,
        "eval_every": 6,
        "flip": true,
    });
    std::fs::write(&config, cfg.to_string()).unwrap();
    let code = fqrcnn::cli::run(["fqrcnn", "train", "--config", config.to_str().unwrap()]);
    assert_eq!(code, 0, "training through the CLI failed");
    let read = |f: &str| std::fs::read(dir.join(out).join(f)).unwrap();
    (read("metrics.csv"), read("model.ckpt"))
}

fn a10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), &generate_dataset(&SceneSpec::default(), 8, 4).unwrap()).unwrap();
    let (m1, c1) = train_via_cli(dir.path(), "a");
    let (m2, c2) = train_via_cli(dir.path(), "b");
    let path = dir.path().join("a").join("model.ckpt");
    let again = dir.path().join("again.ckpt");
    TrainState::load(&path).unwrap().save(&again).unwrap();
    let round_trip = std::fs::read(&again).unwrap() == c1;
    let rows = m1.iter().filter(|&&b| b == b'\n').count() - 1;
    outcome(
        m1 == m2 && c1 == c2 && round_trip,
        format!(
            "two runs: metrics.csv ({rows} rows) identical {}, checkpoint ({} bytes) identical {}, load/save round trip identical {round_trip}",
            m1 == m2,
            c1.len(),
            c1 == c2
        ),
    )
}

fn a11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
        Bbox::new(x, y, x + rng.gen_range(1.0..30.0), y + rng.gen_range(1.0..30.0))
    };

    // AP depends on ranks only.
    for _ in 0..200 {
        let gts: Vec<Bbox> = (0..rng.gen_range(1..4)).map(|_| rand_box(&mut rng)).collect();
        let dets: Vec<(Bbox, f64)> = (0..rng.gen_range(0..8))
            .map(|i| {
                let b = if i % 2 == 0 { gts[i % gts.len()] } else { rand_box(&mut rng) };
                (b, rng.gen_range(0.01..1.0))
            })
            .collect();
        let s = rng.gen_range(0.01..100.0);
        let scaled: Vec<(Bbox, f64)> = dets.iter().map(|&(b, v)| (b, v * s)).collect();
        if average_precision(&[dets], &[gts.clone()], 0.5) != average_precision(&[scaled], &[gts], 0.5) {
            failures.push("ap score scaling");
            break;
        }
    }

    // GIoU bounds and symmetry.
    for _ in 0..1000 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let (g, h) = (giou(&a, &b), giou(&b, &a));
        if !(-1.0..=1.0).contains(&g) || (g - h).abs() > 1e-15 || g > a.iou(&b) + 1e-15 || (giou(&a, &a) - 1.0).abs() > 1e-15 {
            failures.push("giou bounds/symmetry");
            break;
        }
    }

    // Match quality: monotone in both arguments; alpha endpoints.
    for _ in 0..1000 {
        let (o, i, d) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5));
        let p = MatchQualityParams { alpha: rng.gen_range(0.0..=1.0) };
        let q = match_quality(o, i, p);
        let mono = match_quality((o + d).min(1.0), i, p) >= q && match_quality(o, (i + d).min(1.0), p) >= q;
        let ends = match_quality(o, i, MatchQualityParams { alpha: 0.0 }) == o
            && match_quality(o, i, MatchQualityParams { alpha: 1.0 }) == i;
        if !(mono && ends) {
            failures.push("match quality");
            break;
        }
    }

    // Softmax rows are distributions.
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&mut r, &[5, 7], -30.0, 30.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, 1).unwrap();
        let d = g.data(s);
        let ok = d.chunks(7).all(|row| row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        if !ok {
            failures.push("softmax normalization");
            break;
        }
    }

    // Cascade head: permuting queries permutes every stage's outputs.
    let cfg = ModelConfig { num_queries: 6, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(5);
    let backbone = Backbone::new(&cfg.backbone(), &mut store, &mut prng).unwrap();
    let head = CascadeHead::new(&mut store, &mut prng, &cfg.head(), 2).unwrap();
    for stage in &head.stages {
        for id in stage.regression_params() {
            let shape = store.get(id).shape().to_vec();
            let v = random_array(&mut prng, &shape, -0.2, 0.2);
            store.get_mut(id).data_mut().copy_from_slice(v.data());
        }
    }
    let image = generate_dataset(&SceneSpec::default(), 1, 3).unwrap().remove(0).image;
    let boxes: Vec<Bbox> = (0..6).map(|_| rand_box(&mut rng)).map(|b| b.clip(64.0, 64.0)).collect();
    let queries = random_array(&mut rng, &[6, cfg.d_model], -1.0, 1.0);
    let run = |q: &Array, b: &[Bbox]| -> Vec<Vec<f64>> {
        let mut ctx = Ctx::inference(&store);
        let img = ctx.g.constant(image.clone());
        let pyr = backbone.extract_pyramid(&mut ctx, img).unwrap();
        let qv = ctx.g.constant(q.clone());
        let bv = ctx.g.constant(Array::new(&[b.len(), 4], b.iter().flat_map(|x| x.to_array()).collect()).unwrap());
        let outs = head.forward(&mut ctx, &pyr, qv, bv, b).unwrap();
        outs.iter()
            .flat_map(|o| [ctx.g.data(o.logits).to_vec(), ctx.g.data(o.boxes).to_vec(), ctx.g.data(o.queries).to_vec()])
            .collect()
    };
    let perm = [3, 0, 5, 1, 4, 2];
    let pq = Array::new(&[6, cfg.d_model], perm.iter().flat_map(|&i| queries.row(i).to_vec()).collect()).unwrap();
    let pb: Vec<Bbox> = perm.iter().map(|&i| boxes[i]).collect();
    let (base, permuted) = (run(&queries, &boxes), run(&pq, &pb));
    let mut worst = 0.0f64;
    for (x, y) in base.iter().zip(&permuted) {
        let width = x.len() / 6;
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..width {
                worst = worst.max((y[row * width + c] - x[src * width + c]).abs());
            }
        }
    }
    if worst > 1e-12 {
        failures.push("head permutation equivariance");
    }

    outcome(
        failures.is_empty(),
        format!(
            "ap rank-only, giou bounded/symmetric, match-quality monotone with alpha endpoints, softmax rows sum to 1, head equivariant (max dev {worst:.1e}); failures {failures:?}"
        ),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);
    let mut bench = Bench::new();
    let criteria: Vec<(&str, &str, Box<dyn Fn(&mut Bench) -> Outcome>)> = vec![
        ("A1", "gradient correctness", Box::new(|_| a1())),
        ("A2", "assignment oracle equivalence", Box::new(|_| a2())),
        ("A3", "overfit sanity", Box::new(|_| a3())),
        ("A4", "generalization", Box::new(a4)),
        ("A5", "featurized vs learnable queries", Box::new(a5)),
        ("A6", "stage saturation", Box::new(a6)),
        ("A7", "latency decomposition", Box::new(|b| a7(b))),
        ("A8", "recall harness", Box::new(a8)),
        ("A9", "metric oracles", Box::new(|_| a9())),
        ("A10", "determinism and persistence", Box::new(|_| a10())),
        ("A11", "invariance suite", Box::new(|_| a11())),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in &criteria {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let o = f(&mut bench);
        ran += 1;
        failed += usize::from(!o.pass);
        println!(
            "{id:<4} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
