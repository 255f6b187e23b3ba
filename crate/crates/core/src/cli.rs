//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataeval::{
    ar_at_k, bench_latency, deltas, generate_scene, proposal_recall, read_dataset, render_overlay,
    scene_seed, write_dataset, EvalReport, Mark, Scene, SceneSpec,
};
use crate::detector::{read_checkpoint, MetricsRow, Model, ModelConfig, TrainOptions, TrainState, Trainer};
use crate::error::{Error, Result};
use crate::gradcheck;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Checkpoint written into the output directory of a training run.
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Training run description: the model plus data paths and run controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Training scenes (dataset directory or index file).
    pub dataset: Option<PathBuf>,
    /// Scenes evaluated every `eval_every` steps and at the end.
    pub eval_dataset: Option<PathBuf>,
    /// Checkpoint to resume from.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    /// `0` evaluates only at the end.
    pub eval_every: u64,
    /// Seed of the batch order and augmentation.
    pub seed: u64,
    pub flip: bool,
    pub lr_drop_step: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            model: ModelConfig::default(),
            dataset: None,
            eval_dataset: None,
            checkpoint: None,
            output_dir: PathBuf::from("run"),
            steps: t.steps,
            batch_size: t.batch_size,
            eval_every: 0,
            seed: t.seed,
            flip: t.flip,
            lr_drop_step: t.lr_drop_step,
        }
    }
}

impl RunConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            flip: self.flip,
            lr_drop_step: self.lr_drop_step,
        }
    }

    /// Reads an optional JSON file, applies `key=value` overrides and
    /// validates the result. Errors name the offending key path.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.model.validate()?;
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and otherwise taken as a string.
/// Keys not found at the top level but present in the model section are
/// routed there, so `--set n_stages=4` works.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let top_level = root.get(path[0]).is_some();
    let in_model = root["model"].get(path[0]).is_some();
    if !top_level && in_model {
        path.insert(0, "model");
    }
    let mut slot = root;
    for seg in &path[..path.len() - 1] {
        slot = match slot {
            Value::Object(m) => m.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default())),
            _ => return Err(Error::Config(format!("override `{key}`: `{seg}` is not a section"))),
        };
    }
    match slot {
        Value::Object(m) => {
            m.insert(path[path.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("override `{key}` does not name a field"))),
    }
}

#[derive(Parser, Debug)]
#[command(name = "fqrcnn", version, about = "Featurized-query detector on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (JSONL index plus PPM images).
    GenData(GenDataArgs),
    /// Train a model, writing metrics CSVs and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write detections (and optionally overlays) for every scene.
    Infer(InferArgs),
    /// Proposal recall against IoU, AR@K and per-stage box-offset histograms.
    Recall(RecallArgs),
    /// Time backbone, query generation and each decoder stage.
    Bench(BenchArgs),
    /// Finite-difference check of every primitive and composed loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Scene specification JSON; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set n_stages=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Detections JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Directory receiving one overlay PPM per scene.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecallArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Recall curve and AR@K CSV.
    #[arg(long)]
    out: PathBuf,
    /// Proposal budgets for AR@K; the query count is always included.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10])]
    ks: Vec<usize>,
    /// Also write per-stage box-offset histograms here.
    #[arg(long)]
    deltas: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Trained weights; a freshly initialized model is timed when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Scenes to time on; eight generated scenes when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = gradcheck::TOLERANCE)]
    tolerance: f64,
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss(_) | Error::Grad(_) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Infer(a) => infer(&a),
        Command::Recall(a) => recall(&a),
        Command::Bench(a) => bench(&a),
        Command::Gradcheck(a) => return gradcheck_cmd(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_exists(what: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    require_exists("dataset", path)?;
    let scenes = read_dataset(path)?;
    if scenes.is_empty() {
        return Err(Error::Dataset(format!("no scenes in {}", path.display())));
    }
    Ok(scenes)
}

fn load_model(path: &Path) -> Result<Model> {
    require_exists("checkpoint", path)?;
    Ok(TrainState::load(path)?.model)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut de = serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(&mut de)
                .map_err(|e| Error::Config(format!("{} at `{}`: {}", p.display(), e.path(), e.inner())))?
        }
        None => SceneSpec::default(),
    };
    spec.validate()?;
    if a.out.is_dir() && !a.force && fs::read_dir(&a.out).map_err(|e| Error::io(&a.out, e))?.next().is_some() {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", a.out.display())));
    }
    let mut scenes = Vec::with_capacity(a.count);
    let mut dropped = 0;
    for i in 0..a.count {
        let g = generate_scene(scene_seed(a.seed, i), &spec)?;
        dropped += g.dropped;
        let mut s = g.scene;
        s.id = format!("{i:06}");
        scenes.push(s);
    }
    let index = write_dataset(&a.out, &scenes)?;
    let objects: usize = scenes.iter().map(|s| s.annotation.boxes.len()).sum();
    println!("wrote {} scenes ({objects} objects, {dropped} dropped after retries) to {}", a.count, index.display());
    Ok(())
}

fn eval_row(step: u64, r: &EvalReport) -> String {
    format!("{step},{},{},{}\n", r.ap50, r.ap75, r.map)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.config.as_deref(), &a.config.set)?;
    let dataset = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("`dataset` is required for training".into()))?;
    require_exists("dataset", dataset)?;
    if let Some(p) = &cfg.eval_dataset {
        require_exists("eval_dataset", p)?;
    }
    if let Some(p) = &cfg.checkpoint {
        require_exists("checkpoint", p)?;
    }
    let train_scenes = load_scenes(dataset)?;
    let eval_scenes = cfg.eval_dataset.as_deref().map(load_scenes).transpose()?;
    for s in &train_scenes {
        s.annotation.validate(s.width() as f64, s.height() as f64, cfg.model.num_classes)?;
    }

    let mut state = TrainState::new(&cfg.model)?;
    let resumed = match &cfg.checkpoint {
        Some(p) => {
            state.restore(&read_checkpoint(p)?)?;
            true
        }
        None => false,
    };
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join("metrics.csv");
    let timing_path = out.join("timing.csv");
    let eval_path = out.join("eval.csv");

    let data: Vec<_> = train_scenes.into_iter().map(|s| (s.image, s.annotation)).collect();
    let trainer = Trainer::new(cfg.train_options(), &data)?;
    let mut metrics = String::new();
    let mut timing = String::new();
    let mut evals = String::new();
    if !(resumed && metrics_path.exists()) {
        metrics = MetricsRow::header(cfg.model.n_stages) + "\n";
        timing = "step,wall_ms\n".into();
        evals = "step,ap50,ap75,map\n".into();
    }
    let append = |path: &Path, text: &str| -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    };
    if !resumed {
        for p in [&metrics_path, &timing_path, &eval_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }

    let start_step = state.step;
    eprintln!(
        "training {} parameters from step {start_step} to {} on {} scenes",
        state.model.parameter_count(),
        cfg.steps,
        data.len()
    );
    let every = if cfg.eval_every == 0 { cfg.steps.max(1) } else { cfg.eval_every };
    let mut outcome = Ok(());
    while state.step < cfg.steps {
        let target = ((state.step / every + 1) * every).min(cfg.steps);
        let chunk = Trainer::new(TrainOptions { steps: target, ..trainer.options }, &data)?;
        let mut last = Instant::now();
        let mut last_row = None;
        let r = chunk.run(&mut state, |_, row| {
            let _ = writeln!(metrics, "{}", row.line());
            let _ = writeln!(timing, "{},{}", row.step, last.elapsed().as_secs_f64() * 1e3);
            last = Instant::now();
            last_row = Some(row.report.total);
        });
        if let Err(e) = r {
            outcome = Err(e);
            break;
        }
        let mut line = format!("step {} loss {:.4}", state.step, last_row.unwrap_or(f64::NAN));
        if let Some(scenes) = &eval_scenes {
            let rep = EvalReport::evaluate(&state.model, scenes)?;
            evals.push_str(&eval_row(state.step, &rep));
            let _ = write!(line, " ap50 {:.4} ap75 {:.4}", rep.ap50, rep.ap75);
        }
        eprintln!("{line}");
        append(&metrics_path, &std::mem::take(&mut metrics))?;
        append(&timing_path, &std::mem::take(&mut timing))?;
        append(&eval_path, &std::mem::take(&mut evals))?;
        state.save(&ckpt_path)?;
    }
    append(&metrics_path, &metrics)?;
    append(&timing_path, &timing)?;
    append(&eval_path, &evals)?;
    state.save(&ckpt_path)?;
    outcome?;
    println!("checkpoint at step {} written to {}", state.step, ckpt_path.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.dataset)?;
    let report = EvalReport::evaluate(&model, &scenes)?;
    let csv = report.to_csv();
    match &a.out {
        Some(p) => {
            write_file(p, &csv)?;
            println!("ap50 {:.4} ap75 {:.4} map {:.4} over {} scenes", report.ap50, report.ap75, report.map, report.images);
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct DetectionRecord {
    bbox: [f64; 4],
    class: usize,
    score: f64,
}

#[derive(Serialize)]
struct InferRecord<'a> {
    id: &'a str,
    detections: Vec<DetectionRecord>,
}

fn infer(a: &InferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.dataset)?;
    let mut out = String::new();
    for s in &scenes {
        let dets = model.infer(&s.image)?;
        let rec = InferRecord {
            id: &s.id,
            detections: dets
                .iter()
                .map(|d| DetectionRecord {
                    bbox: d.bbox.to_array(),
                    class: d.class,
                    score: d.score,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
        if let Some(dir) = &a.overlay {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let marks: Vec<Mark> = dets
                .iter()
                .filter(|d| d.score >= 0.3)
                .map(|d| Mark {
                    bbox: d.bbox,
                    class: d.class,
                    score: Some(d.score),
                })
                .collect();
            render_overlay(&s.image, &marks, &dir.join(format!("{}.ppm", s.id)))?;
        }
    }
    write_file(&a.out, out)?;
    println!("detections for {} scenes written to {}", scenes.len(), a.out.display());
    Ok(())
}

fn recall(a: &RecallArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.dataset)?;
    let grid: Vec<f64> = (1..=19).map(|i| f64::from(i) / 20.0).collect();
    let (curve, props) = proposal_recall(&model, &scenes, &grid)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.annotation.boxes.clone()).collect();
    let mut ks = a.ks.clone();
    ks.push(model.config.num_queries);
    ks.sort_unstable();
    ks.dedup();
    let ar = ar_at_k(&props, &gts, &ks);
    let mut csv = String::from("iou,recall\n");
    for (t, r) in &curve {
        let _ = writeln!(csv, "{t:.2},{r}");
    }
    csv.push_str("\nk,average_recall\n");
    for (k, v) in &ar {
        let _ = writeln!(csv, "{k},{v}");
    }
    write_file(&a.out, &csv)?;
    let at = |t: f64| curve.iter().find(|c| (c.0 - t).abs() < 1e-9).map_or(0.0, |c| c.1);
    println!("recall@0.5 {:.4} recall@0.75 {:.4} AR@{} {:.4}", at(0.5), at(0.75), ar.last().unwrap().0, ar.last().unwrap().1);
    if let Some(p) = &a.deltas {
        let hist = deltas::delta_distribution(&model, &scenes)?;
        write_file(p, deltas::to_csv(&hist))?;
        for (i, h) in hist.iter().enumerate() {
            println!("stage {} mean |delta| {:.4} over {} matched proposals", i + 1, h.mean_abs(), h.matched);
        }
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => Model::new(&RunConfig::load(a.config.config.as_deref(), &a.config.set)?.model)?,
    };
    let images: Vec<_> = match &a.dataset {
        Some(p) => load_scenes(p)?.into_iter().map(|s| s.image).collect(),
        None => (0..8)
            .map(|i| generate_scene(scene_seed(0, i), &SceneSpec::default()).map(|g| g.scene.image))
            .collect::<Result<_>>()?,
    };
    let lat = bench_latency(&model, &images, a.warmup, a.runs)?;
    let csv = lat.to_csv();
    match &a.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "total {:.2} ms, query generation {:.1}% of total, decoder {:.2} ms over {} stages",
        lat.total.mean,
        100.0 * lat.query_share(),
        lat.decoder.mean,
        lat.stages.len()
    );
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> i32 {
    let reports = match gradcheck::full_suite(a.seeds) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NUMERIC;
        }
    };
    let mut failed = 0;
    for r in &reports {
        let ok = r.max_error <= a.tolerance;
        failed += usize::from(!ok);
        println!("{:<24} {:>10.3e} {}", r.name, r.max_error, if ok { "ok" } else { "FAIL" });
    }
    let worst = reports.iter().max_by(|x, y| x.max_error.total_cmp(&y.max_error)).expect("non-empty suite");
    println!(
        "worst: {} at {:.3e} over {} seeds; {} of {} checks above {:e}",
        worst.name,
        worst.max_error,
        a.seeds,
        failed,
        reports.len(),
        a.tolerance
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_NUMERIC
    }
}
