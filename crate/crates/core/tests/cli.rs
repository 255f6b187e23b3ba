use std::fs;
use std::path::Path;

use fqrcnn::cli::run;

fn fq(args: &[&str]) -> i32 {
    run(std::iter::once("fqrcnn").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, count: usize, seed: u64) {
    let code = fq(&["gen-data", "--out", s(dir), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code, 0);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![
        "train".to_string(),
        "--set".into(),
        format!("dataset={}", s(data)),
        "--set".into(),
        format!("output_dir={}", s(out)),
    ];
    for e in extra {
        args.push("--set".into());
        args.push(e.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    fq(&refs)
}

#[test]
fn gen_data_zero_scenes_writes_empty_index() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 0, 1);
    assert_eq!(fs::read(data.join("scenes.jsonl")).unwrap(), b"");
}

#[test]
fn gen_data_is_reproducible_and_guards_existing_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, 3, 9);
    gen(&b, 3, 9);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    assert_eq!(fq(&["gen-data", "--out", s(&a), "--count", "2"]), 3);
    assert_eq!(fq(&["gen-data", "--out", s(&a), "--count", "2", "--force"]), 0);
}

#[test]
fn zero_step_training_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("d"), dir.path().join("run"));
    gen(&data, 2, 1);
    assert_eq!(train(&data, &out, &["steps=0"]), 0);
    assert!(out.join("model.ckpt").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "{metrics}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 4, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train(&data, &a, &["steps=2", "batch_size=2"]), 0);
    let ckpt = format!("checkpoint={}", s(&a.join("model.ckpt")));
    assert_eq!(train(&data, &a, &["steps=4", "batch_size=2", &ckpt]), 0);
    assert_eq!(train(&data, &b, &["steps=4", "batch_size=2"]), 0);
    for f in ["metrics.csv", "model.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluate_infer_recall_and_bench_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("d"), dir.path().join("run"));
    gen(&data, 3, 5);
    assert_eq!(train(&data, &out, &["steps=1", "batch_size=1"]), 0);
    let ckpt = out.join("model.ckpt");

    let report = dir.path().join("eval.csv");
    assert_eq!(fq(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&report)]), 0);
    assert!(fs::read_to_string(&report).unwrap().starts_with("metric,value\n"));

    let (dets, overlay) = (dir.path().join("dets.jsonl"), dir.path().join("overlay"));
    let code = fq(&[
        "infer", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&dets), "--overlay", s(&overlay),
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(&dets).unwrap().lines().count(), 3);
    assert_eq!(fs::read_dir(&overlay).unwrap().count(), 3);

    let (recall, deltas) = (dir.path().join("recall.csv"), dir.path().join("deltas.csv"));
    let code = fq(&[
        "recall", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&recall), "--deltas", s(&deltas),
    ]);
    assert_eq!(code, 0);
    assert!(fs::metadata(&recall).unwrap().len() > 0);
    assert!(fs::read_to_string(&deltas).unwrap().lines().count() > 1);

    let bench = dir.path().join("bench.csv");
    let code = fq(&["bench", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--runs", "10", "--out", s(&bench)]);
    assert_eq!(code, 0);
    assert!(fs::read_to_string(&bench).unwrap().contains("query_generation"));
}

#[test]
fn empty_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, empty) = (dir.path().join("d"), dir.path().join("e"));
    gen(&data, 1, 1);
    gen(&empty, 0, 1);
    let out = dir.path().join("run");
    assert_eq!(train(&data, &out, &["steps=0"]), 0);
    let ckpt = out.join("model.ckpt");
    assert_eq!(fq(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&empty)]), 3);
    assert_eq!(train(&empty, &dir.path().join("r2"), &["steps=1"]), 3);
}

#[test]
fn bad_arguments_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fq(&["frobnicate"]), 2);
    assert_eq!(fq(&["gen-data", "--count", "1"]), 2);
    assert_eq!(fq(&["gradcheck", "--seeds", "two"]), 2);
    assert_eq!(fq(&["train", "--set", "bogus=1"]), 3);
    assert_eq!(fq(&["train", "--set", "no_equals_sign"]), 3);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"n_stages": 2, "typo": 1}}"#).unwrap();
    assert_eq!(fq(&["train", "--config", s(&cfg)]), 3);
    fs::write(&cfg, r#"{"model": {"n_stages": 0}}"#).unwrap();
    assert_eq!(fq(&["bench", "--config", s(&cfg)]), 3);
    assert_eq!(fq(&["eval", "--checkpoint", "/nonexistent.ckpt", "--dataset", "/nonexistent"]), 3);
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(fq(&["gradcheck", "--seeds", "2"]), 0);
}

#[test]
fn diverging_training_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 2, 3);
    let code = train(&data, &dir.path().join("run"), &["steps=3", "model.optimizer.lr=1e300"]);
    assert_eq!(code, 4);
}
