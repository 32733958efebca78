use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use dualguide::cli::run;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Small train/eval sets and a short training run shared by several tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(extra_train: &[&str]) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        run(["dualguide", "gen", "--out", p(&root.join("train")), "--n", "200", "--grid", "3", "--colors", "4"]).unwrap();
        run([
            "dualguide", "gen", "--out", p(&root.join("eval")), "--n", "40", "--grid", "3", "--colors", "4",
            "--split", "eval-anti",
        ])
        .unwrap();
        let (train, out) = (root.join("train"), root.join("run"));
        let mut args = vec![
            "dualguide", "train", "--data", p(&train), "--out", p(&out), "--steps", "20",
            "--set", "model.d_model=16", "--set", "model.d_ff=32", "--set", "model.n_layers=2",
        ];
        args.extend_from_slice(extra_train);
        let args: Vec<String> = args.into_iter().map(String::from).collect();
        run(args).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn gen_reports_the_bias_rate_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, anti) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("anti"));
    for out in [&a, &b] {
        run(["dualguide", "gen", "--out", p(out), "--n", "300", "--beta", "1.0", "--seed", "9"]).unwrap();
    }
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["bias_rate"], 1.0);
    assert_eq!(summary["split"], "train-biased");
    assert_eq!(fs::read(a.join("dataset.jsonl")).unwrap(), fs::read(b.join("dataset.jsonl")).unwrap());
    assert_eq!(read_jsonl(&a.join("dataset.jsonl")).len(), 300);

    run(["dualguide", "gen", "--out", p(&anti), "--n", "300", "--split", "eval"]).unwrap();
    assert_eq!(read_json(&anti.join("summary.json"))["text_prior_accuracy"], 0.0);
    assert_eq!(read_json(&anti.join("resolved_config.json"))["data.n_eval"], 300);
}

#[test]
fn train_writes_checkpoint_metrics_and_summary() {
    let f = Fixture::new(&["--theta", "0", "--attention", "causal"]);
    let summary = read_json(&f.path("run/summary.json"));
    assert_eq!(summary["replaced_fraction"], 0.0);
    assert_eq!(summary["steps"], 20);
    let manifest = read_json(&f.path("run/checkpoint/manifest.json"));
    assert_eq!(manifest["model_config"]["attention_mode"], "causal");
    assert_eq!(manifest["model_config"]["l_visual"], 9);
    let metrics = read_jsonl(&f.path("run/metrics.jsonl"));
    assert!(!metrics.is_empty());
    for key in ["step", "loss", "lr", "replaced_fraction"] {
        assert!(metrics[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn eval_sweeps_lambda_and_traces_every_step() {
    let f = Fixture::new(&[]);
    run([
        "dualguide", "eval", "--ckpt", p(&f.path("run")), "--data", p(&f.path("eval")), "--out", p(&f.path("ev")),
        "--lambda", "0", "1", "1.8",
    ])
    .unwrap();
    let rows = read_jsonl(&f.path("ev/eval_results.jsonl"));
    assert_eq!(rows.len(), 3);
    for (row, lambda) in rows.iter().zip([0.0, 1.0, 1.8]) {
        assert_eq!(row["lambda"], lambda);
        assert_eq!(row["n"], 40);
        assert_eq!(row["strategy"], "greedy");
        let acc = row["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let trace = read_jsonl(&f.path("ev/trace.jsonl"));
    assert!(trace.len() >= 3 * 40);
    for key in ["sample", "lambda", "step", "token", "lc_top5", "lu_top5", "lg_top5"] {
        assert!(trace[0].get(key).is_some(), "{key}");
    }
    assert_eq!(trace[0]["lg_top5"].as_array().unwrap().len(), 5);
}

#[test]
fn analyze_modes_write_their_outputs() {
    let f = Fixture::new(&[]);
    let common = |out: &str| -> Vec<String> {
        ["dualguide", "analyze", "--ckpt", p(&f.path("run")), "--data", p(&f.path("eval")), "--out", out, "--lambda", "1"]
            .into_iter()
            .map(String::from)
            .collect()
    };
    let layers = f.path("layers");
    let mut args = common(p(&layers));
    args.extend(["--mode", "layers", "--n-samples", "5"].map(String::from));
    run(args).unwrap();
    let csv = fs::read_to_string(layers.join("layers.csv")).unwrap();
    assert!(csv.starts_with("layer,visual_share,text_share"));
    assert_eq!(csv.lines().count(), 1 + 2);

    let positions = f.path("positions");
    let mut args = common(p(&positions));
    args.extend(["--mode", "positions", "--max-steps", "4", "--n-samples", "5"].map(String::from));
    run(args).unwrap();
    assert_eq!(fs::read_to_string(positions.join("positions.csv")).unwrap().lines().count(), 1 + 4);

    let prune = f.path("prune");
    let mut args = common(p(&prune));
    args.extend(["--mode", "prune", "--keep-ratio", "1.0"].map(String::from));
    run(args).unwrap();
    let summary = read_json(&prune.join("prune.json"));
    assert_eq!(summary["accuracy"], summary["unpruned_accuracy"]);
    assert_eq!(summary["drop"], 0.0);
    assert_eq!(summary["prune_layer"], 1);

    let mut eval = common(p(&f.path("ev")));
    eval[1] = "eval".into();
    run(eval).unwrap();
    assert_eq!(read_jsonl(&f.path("ev/eval_results.jsonl"))[0]["accuracy"], summary["accuracy"]);
}

#[test]
fn usage_errors_are_reported() {
    let f = Fixture::new(&[]);
    let (ckpt, eval) = (f.path("run"), f.path("eval"));
    let bad_mode = ["dualguide", "analyze", "--ckpt", p(&ckpt), "--data", p(&eval), "--out", "x", "--mode", "heads"];
    assert!(run(bad_mode).is_err());
    let missing = f.path("nope");
    let err = run(["dualguide", "train", "--data", p(&missing), "--out", p(&f.path("r2"))]).unwrap_err();
    assert!(err.to_string().contains("dataset not found"), "{err}");
    assert!(run(["dualguide", "train", "--data", p(&f.path("train")), "--out", "y", "--set", "train.thetta=1"]).is_err());
}
