use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn hybridcrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridcrop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hybridcrop(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has a line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&["gen", "--seed", seed, "--images", "3", "--candidates", "12", "--out", s(dir)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 1 + 3 + 3 * 9);
    assert_eq!(ta, tb);
    assert_ne!(
        fs::read(a.join("dataset.jsonl")).unwrap(),
        fs::read(c.join("dataset.jsonl")).unwrap()
    );
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--seed", "3", "--images", "4", "--candidates", "15", "--out", s(&data)]);
    let dataset = data.join("dataset.jsonl");
    let mut lines = String::new();
    for line in fs::read_to_string(&dataset).unwrap().lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let preds: Vec<Value> = r["crops"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| json!({"box": c["box"], "score": c["mos"].as_f64().unwrap() / 5.0}))
            .collect();
        lines += &json!({"id": r["id"], "predictions": preds}).to_string();
        lines.push('\n');
    }
    let preds = tmp.path().join("preds.jsonl");
    fs::write(&preds, lines).unwrap();
    let report_path = tmp.path().join("metrics.json");
    ok(&["eval", "--predictions", s(&preds), "--data.eval", s(&dataset), "--out", s(&report_path)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for n in ["5", "10"] {
        for k in ["1", "2", "3", "4"] {
            assert_eq!(report["acc"][n][k], 1.0, "Acc{k}/{n}");
        }
        assert_eq!(report["acc_bar"][n], 1.0);
    }
}

#[test]
fn train_then_eval_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let small = [
        "--epochs", "2", "--data.train_images", "6", "--data.eval_images", "3",
        "--data.candidates", "12", "--model.n_layers", "1",
    ];
    let mut args = vec!["train", "--seed", "4", "--out", s(&run)];
    args.extend(small);
    ok(&args);
    let curve: Value = serde_json::from_str(&fs::read_to_string(run.join("loss_curve.json")).unwrap()).unwrap();
    assert_eq!(curve["epoch_losses"].as_array().unwrap().len(), 2);
    assert_eq!(curve["step_losses"].as_array().unwrap().len(), 4);
    assert!(run.join("checkpoint/manifest.json").is_file());

    let before = tree(&run);
    ok(&args);
    assert_eq!(tree(&run), before, "retraining with the same seed rewrites identical files");

    let cfg = run.join("config.json");
    let ckpt = run.join("checkpoint");
    let table = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(table.contains("Acc1/5"), "{table}");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["examples"], 3);
}

#[test]
fn fuse_writes_a_prior_on_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--seed", "5", "--images", "1", "--candidates", "10", "--out", s(&data)]);
    let line = fs::read_to_string(data.join("dataset.jsonl")).unwrap();
    let r: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let cams: Vec<String> = r["cams"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| data.join(c.as_str().unwrap()).display().to_string())
        .collect();
    let probs: Vec<String> = r["probabilities"].as_array().unwrap().iter().map(|p| p.to_string()).collect();
    let probs = probs.join(",");
    let prior = tmp.path().join("prior.aesc");
    let pgm = tmp.path().join("prior.pgm");
    let mut args = vec!["fuse", "--mcab", "average", "--out", s(&prior), "--pgm", s(&pgm), "--probs", &probs, "--cams"];
    args.extend(cams.iter().map(String::as_str));
    ok(&args);
    let t = hybridcrop::tensor::read_tensor(&prior).unwrap();
    assert_eq!(t.dims(), &[8, 8]);
    assert!(t.data().iter().all(|&b| b > 0.0 && b <= 1.0));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));

    let out = hybridcrop(&["fuse", "--mcab", "off", "--out", s(&prior), "--probs", &probs, "--cams"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes_on_a_few_seeds() {
    let stdout = ok(&["gradcheck", "--seeds", "2"]);
    assert!(stdout.contains("training_loss"), "{stdout}");
    assert!(stdout.contains("checks below"), "{stdout}");
}

#[test]
fn ablate_tabulates_every_mode_and_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablation.json");
    ok(&[
        "ablate", "--epochs", "1", "--data.train_images", "4", "--data.eval_images", "2",
        "--data.candidates", "12", "--out", s(&out),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 2);
    for mode in ["off", "max", "average"] {
        for layers in [1, 2] {
            assert!(rows.iter().any(|r| r["mcab"] == mode && r["layers"] == layers));
        }
    }
}

#[test]
fn failures_are_reported_as_json() {
    let e = error_json(&hybridcrop(&["train", "--model.depth", "3", "--out", "/tmp/x"]));
    assert_eq!(e["error"]["kind"], "usage");
    assert!(e["error"]["message"].as_str().unwrap().contains("model.depth"));

    let e = error_json(&hybridcrop(&["train", "--data.train", "/no/such/file.jsonl", "--out", "/tmp/x"]));
    assert_eq!(e["error"]["kind"], "experiment");

    let e = error_json(&hybridcrop(&["frobnicate"]));
    assert_eq!(e["error"]["kind"], "usage");

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"x\"}\n").unwrap();
    let e = error_json(&hybridcrop(&["train", "--data.train", s(&bad), "--out", s(tmp.path())]));
    assert_eq!(e["error"]["kind"], "data");
    assert!(e["error"]["message"].as_str().unwrap().contains("line 1"), "{e}");
}
