use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn slidemine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidemine"))
        .args(args)
        .env_remove("SLIDEMINE_WORKERS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "one summary line: {text}");
    serde_json::from_str(&text).unwrap()
}

fn stderr_error(out: &Output) -> (i32, String, String) {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let line = text.lines().last().expect("error line");
    let v: Value = serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {line}"));
    (
        out.status.code().unwrap(),
        v["error"].as_str().unwrap().to_string(),
        v["message"].as_str().unwrap().to_string(),
    )
}

const SPEC: &str = r#"{
  "seed": 21,
  "width": 672,
  "height": 672,
  "lesions_per_slide": [1, 2],
  "sources": [
    {
      "name": "alpha",
      "train": { "diffuse_adc": 4, "other_adc": 3, "non_neoplastic": 4 },
      "validation": { "diffuse_adc": 2, "other_adc": 1, "non_neoplastic": 1 },
      "test": { "diffuse_adc": 3, "other_adc": 2, "non_neoplastic": 3 }
    }
  ]
}"#;

fn generate(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    let v = stdout_json(&slidemine(&["generate", "--spec", p(&spec), "--out", p(&data)]));
    assert_eq!(v["slides"], 23);
    data
}

fn blank_slide(dir: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "png") {
            let (w, h) = image::image_dimensions(&path).unwrap();
            image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255])).save(&path).unwrap();
        }
    }
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let slide = data.join("slides").join("alpha_test_000");

    stdout_json(&slidemine(&["mask", "--slide", p(&slide), "--out", p(&dir.path().join("mask"))]));
    assert!(dir.path().join("mask/mask.png").exists());
    let tiles = dir.path().join("tiles.json");
    let v = stdout_json(&slidemine(&["tile", "--slide", p(&slide), "--out", p(&tiles), "--stride-px", "112"]));
    assert!(v["tissue_tiles"].as_u64().unwrap() > 0);

    let train = dir.path().join("train");
    stdout_json(&slidemine(&[
        "train", "--manifest", p(&data), "--out", p(&train), "--train-mode", "full", "--max-epochs", "3", "--seed", "4",
    ]));
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(train.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["max_epochs"], 3);
    assert_eq!(echoed["train_mode"], "full");
    assert!(train.join("checkpoint.json").exists());
    assert!(train.join("train.jsonl").exists());

    let preds = dir.path().join("preds.json");
    let heatmaps = dir.path().join("heatmaps");
    let v = stdout_json(&slidemine(&[
        "infer", "--manifest", p(&data), "--checkpoint", p(&train), "--heatmaps", p(&heatmaps), "--out", p(&preds),
    ]));
    assert_eq!(v["predictions"], 8);
    assert!(heatmaps.join("alpha_test_000/overlay.png").exists());
    assert!(heatmaps.join("alpha_test_000/heatmap.json").exists());

    let instance: Value = serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(slidemine::pipeline::PREDICTIONS_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let report = dir.path().join("report");
    let v = stdout_json(&slidemine(&[
        "evaluate", "--manifest", p(&data), "--predictions", p(&preds), "--out", p(&report), "--iters", "200",
    ]));
    assert_eq!(v["rows"], 1);
    assert!(report.join("report.json").exists());
    assert!(report.join("roc_alpha.csv").exists());
    let txt = std::fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(txt.contains("alpha"), "{txt}");

    // a blank slide fails on its own and the rest still get predictions
    blank_slide(&slide);
    let v = stdout_json(&slidemine(&["infer", "--manifest", p(&data), "--checkpoint", p(&train), "--out", p(&preds)]));
    assert_eq!(v["predictions"], 7);
    assert_eq!(v["failures"], 1);
    let instance: Value = serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
    assert!(validator.is_valid(&instance));
    let failure = &instance["failures"][0];
    assert_eq!(failure["slide_id"], "alpha_test_000");
    assert!(["no_tissue", "degenerate_histogram"].contains(&failure["kind"].as_str().unwrap()), "{failure}");

    // evaluation refuses incomplete predictions
    let out = slidemine(&["evaluate", "--manifest", p(&data), "--predictions", p(&preds), "--out", p(&report)]);
    let (code, kind, message) = stderr_error(&out);
    assert_eq!((code, kind.as_str()), (1, "completeness"));
    assert!(message.contains("alpha_test_000"), "{message}");
}

#[test]
fn usage_errors_are_json_with_exit_one() {
    let out = slidemine(&["train"]);
    let (code, kind, message) = stderr_error(&out);
    assert_eq!((code, kind.as_str()), (1, "usage"));
    assert!(message.contains("--manifest"), "{message}");

    let out = slidemine(&["infer", "--manifest", "x", "--out", "y", "--aggregation", "median"]);
    assert_eq!(stderr_error(&out).1, "usage");
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let out_file = dir.path().join("o.json");

    let out = slidemine(&["infer", "--manifest", p(&data), "--out", p(&out_file)]);
    let (code, kind, _) = stderr_error(&out);
    assert_eq!((code, kind.as_str()), (1, "usage"));

    let out = slidemine(&[
        "infer", "--manifest", p(&data), "--mode", "two-stage", "--checkpoint", "nowhere.json", "--out", p(&out_file),
    ]);
    assert_eq!(stderr_error(&out).1, "usage");

    let out = slidemine(&["infer", "--manifest", p(&data), "--checkpoint", p(&dir.path().join("nowhere")), "--out", p(&out_file)]);
    let (code, kind, message) = stderr_error(&out);
    assert_eq!((code, kind.as_str()), (1, "usage"));
    assert!(message.contains("nowhere"), "{message}");
    assert!(!out_file.exists());
}

#[test]
fn bad_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, "{\n  \"max_epochs\": 3,\n  \"not_a_key\": 1\n}\n").unwrap();
    let out = slidemine(&["train", "--manifest", "unused", "--out", p(&dir.path().join("o")), "--config", p(&cfg)]);
    let (code, kind, message) = stderr_error(&out);
    assert_eq!((code, kind.as_str()), (1, "configuration"));
    assert!(message.contains("line 3"), "{message}");

    std::fs::write(&cfg, "{\"max_epochs\": 0}").unwrap();
    let out = slidemine(&["train", "--manifest", "unused", "--out", p(&dir.path().join("o")), "--config", p(&cfg)]);
    assert_eq!(stderr_error(&out).1, "configuration");
}

#[test]
fn workers_flag_rejects_zero() {
    let out = slidemine(&["--workers", "0", "evaluate", "--manifest", "m", "--predictions", "p", "--out", "o"]);
    let (code, kind, _) = stderr_error(&out);
    assert_eq!((code, kind.as_str()), (1, "argument"));
}
