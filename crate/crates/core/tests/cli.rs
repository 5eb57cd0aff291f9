use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use relloc::io::dataset::Dataset;
use relloc::io::model::{write_predictions, PairSource, PredictionRecord};
use relloc::proposing::PairProposal;

fn relloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relloc"))
        .args(args)
        .env_remove("RELLOC_CONFIG")
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and returns its JSON summary.
fn ok(args: &[&str]) -> Value {
    let out = relloc(args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.lines().count(), 1, "expected one summary line, got {stdout:?}");
    serde_json::from_str(stdout.trim()).expect("summary is JSON")
}

fn one_line_error(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err:?}");
    assert!(err.starts_with("error"), "stderr: {err:?}");
    assert!(out.stdout.is_empty());
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: &str = r#"{
  "orm": {"hidden": 32, "train": {"epochs": 8, "learning_rate": 0.05}},
  "prm": {"fused_dim": 32, "train": {"epochs": 8, "learning_rate": 0.05}},
  "anchors": {"resolution": 16}
}"#;

#[test]
fn pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), r#"{"num_images": 24, "seed": 5}"#).unwrap();
    fs::write(d.join("fast.json"), FAST).unwrap();
    let (data, cfg) = (d.join("data"), d.join("fast.json"));

    let s = ok(&["synth", "--spec", p(&d.join("spec.json")), "--out", p(&data)]);
    assert_eq!(s["images"], 24);

    let a = ok(&["--config", p(&cfg), "anchors", "build", "--data", p(&data), "--png", "--out", p(&d.join("anchors"))]);
    assert_eq!(a["resolution"], 16);
    assert_eq!(a["counts"].as_array().unwrap().len(), 5);
    assert!(d.join("anchors/png/0_sub.png").exists());

    let g = ok(&["graph", "build", "--anchors", p(&d.join("anchors")), "--out", p(&d.join("graph.edges"))]);
    assert_eq!(g["nodes"], 5);

    let ckpt = d.join("ckpt");
    let t = ok(&["--config", p(&cfg), "--seed", "3", "train", "orm", "--data", p(&data), "--out", p(&ckpt)]);
    assert!(t["final_loss"].as_f64().unwrap().is_finite());
    let t = ok(&["--config", p(&cfg), "--seed", "3", "train", "prm", "--data", p(&data), "--graph", p(&d.join("graph.edges")), "--out", p(&ckpt)]);
    assert_eq!(t["loss_curve"].as_array().unwrap().len(), 8);

    let i1 = ok(&["infer", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&d.join("preds1"))]);
    ok(&["--threads", "2", "infer", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&d.join("preds2"))]);
    assert_eq!(i1["images"], 24);
    for entry in fs::read_dir(d.join("preds1")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(d.join("preds1").join(&name)).unwrap();
        let b = fs::read(d.join("preds2").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between runs");
    }

    for task in ["predicate", "phrase", "relationship"] {
        let e = ok(&["eval", "--preds", p(&d.join("preds1")), "--data", p(&data), "--task", task, "--n", "50", "--k", "5"]);
        let r = e["recall"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r), "{task}: {r}");
    }
    let z = ok(&["eval", "--preds", p(&d.join("preds1")), "--data", p(&data), "--task", "predicate", "--zero-shot", "--train-data", p(&data)]);
    assert_eq!(z["total_gt"], 0);
}

#[test]
fn ground_truth_predictions_score_full_recall() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), r#"{"num_images": 10, "seed": 9}"#).unwrap();
    let data = d.join("data");
    ok(&["synth", "--spec", p(&d.join("spec.json")), "--out", p(&data)]);

    let ds = Dataset::open(&data).unwrap();
    let preds = d.join("preds");
    fs::create_dir_all(&preds).unwrap();
    for img in ds.load_all().unwrap() {
        let records: Vec<PredictionRecord> = img
            .triplets()
            .iter()
            .flat_map(|t| {
                let mut scores = vec![0.0; ds.predicates().len()];
                scores[t.predicate] = 1.0;
                let pair = PairProposal {
                    sub_idx: 0,
                    ob_idx: 1,
                    sub_box: t.sub_box,
                    ob_box: t.ob_box,
                    sub_cat: t.sub_cat,
                    ob_cat: t.ob_cat,
                    rating: 1.0,
                    score: 1.0,
                };
                [PairSource::Proposal, PairSource::GtPair].map(|source| PredictionRecord { source, pair: pair.clone(), scores: scores.clone() })
            })
            .collect();
        write_predictions(&preds, &img.image_id, &records).unwrap();
    }
    for task in ["predicate", "phrase", "relationship"] {
        for averaging in ["micro", "macro"] {
            let e = ok(&["eval", "--preds", p(&preds), "--data", p(&data), "--task", task, "--k", "1", "--averaging", averaging]);
            assert_eq!(e["recall"].as_f64(), Some(1.0), "{task} {averaging}: {e}");
        }
    }
}

#[test]
fn bad_input_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    one_line_error(&relloc(&["infer", "--data", "x"]), 2);
    one_line_error(&relloc(&["eval", "--preds", "a", "--data", "b", "--task", "bogus"]), 2);
    one_line_error(&relloc(&["eval", "--preds", "a", "--data", "b", "--task", "phrase", "--zero-shot"]), 2);
    one_line_error(&relloc(&["frobnicate"]), 2);

    let missing = d.join("nope");
    one_line_error(&relloc(&["anchors", "build", "--data", p(&missing), "--out", p(&d.join("a"))]), 1);
    one_line_error(&relloc(&["synth", "--spec", p(&missing), "--out", p(&d.join("s"))]), 1);

    fs::write(d.join("bad.json"), r#"{"orm": {"hiden": 3}}"#).unwrap();
    one_line_error(&relloc(&["--config", p(&d.join("bad.json")), "gradcheck", "--component", "orm"]), 1);
    fs::write(d.join("neg.json"), r#"{"anchors": {"resolution": 0}}"#).unwrap();
    one_line_error(&relloc(&["--config", p(&d.join("neg.json")), "gradcheck", "--component", "orm"]), 1);

    let env = Command::new(env!("CARGO_BIN_EXE_relloc"))
        .args(["gradcheck", "--component", "ggnn"])
        .env("RELLOC_CONFIG", d.join("bad.json"))
        .output()
        .unwrap();
    one_line_error(&env, 1);
}

#[test]
fn gradcheck_reports_and_fails_on_a_tight_tolerance() {
    let v = ok(&["gradcheck", "--component", "prm", "--instances", "4"]);
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-3);

    let out = relloc(&["gradcheck", "--component", "ggnn", "--instances", "3", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}
