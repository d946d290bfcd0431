use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tilemerge")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("spawn tilemerge")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "expected one line, got {text:?}");
    assert!(text.starts_with("error: "), "{text}");
    text
}

fn synth(dir: &Path, suite: &str) -> (String, String) {
    let out = format!("syn_{suite}");
    ok(dir, &["synth", "--suite", suite, "--out", &out]);
    (format!("{out}/annotations.json"), format!("{out}/sim_detector.json"))
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn help_and_flag_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["--help"]).status.success());
    assert!(run(dir.path(), &["merge", "--help"]).status.success());

    let out = run(dir.path(), &["plan", "--width", "100", "--height", "100", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("--bogus"));

    let out = run(dir.path(), &["eval", "--detections", "missing.jsonl", "--dataset", "nope.json", "--out", "o"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).contains("nope.json"));
    assert!(!dir.path().join("o").exists());

    let out = run(dir.path(), &["run", "--dataset", "x.json", "--strategy", "tile-magic", "--out", "o"]);
    assert!(stderr_line(&out).contains("tile-magic"));

    let out = run(dir.path(), &["plan", "--width", "100", "--height", "100", "--mu", "0.3"]);
    assert!(stderr_line(&out).contains("mu"));

    let out = run(dir.path(), &["plan", "--width", "100", "--height", "100", "--stride", "700"]);
    assert!(stderr_line(&out).contains("stride"));
}

#[test]
fn plan_reference_image() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["plan", "--width", "2617", "--height", "2534", "--out", "grid.json"]);
    let v = read_json(dir.path().join("grid.json"));
    assert_eq!(v[0]["tiles"].as_array().unwrap().len(), 25);
    ok(dir.path(), &["plan", "--width", "2617", "--height", "2534", "--stride", "640", "--out", "grid2.json"]);
    assert_eq!(read_json(dir.path().join("grid2.json"))[0]["tiles"].as_array().unwrap().len(), 20);
    ok(dir.path(), &["plan", "--width", "2560", "--height", "2560", "--stride", "640", "--out", "grid3.json"]);
    assert_eq!(read_json(dir.path().join("grid3.json"))[0]["tiles"].as_array().unwrap().len(), 16);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, _) = synth(dir.path(), "boundary");
    let v = read_json(dir.path().join(&coco));
    let lines: Vec<String> = v["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            let b: Vec<f64> = a["bbox"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
            let cat = a["category_id"].as_u64().unwrap();
            let class = v["categories"].as_array().unwrap().iter().position(|c| c["id"].as_u64() == Some(cat)).unwrap();
            serde_json::json!({
                "image_id": a["image_id"],
                "box_global": [b[0], b[1], b[0] + b[2], b[1] + b[3]],
                "score": 1.0,
                "class_id": class,
            })
            .to_string()
        })
        .collect();
    fs::write(dir.path().join("gt.jsonl"), lines.join("\n")).unwrap();
    ok(dir.path(), &["eval", "--detections", "gt.jsonl", "--dataset", &coco, "--out", "ev"]);
    let r = read_json(dir.path().join("ev/comparison.json"));
    assert_eq!(r["reports"][0]["map50"].as_f64(), Some(1.0));
    assert_eq!(r["reports"][0]["operating_point"]["precision"].as_f64(), Some(1.0));
    for f in ["comparison", "small_defect_recall", "boundary_recall"] {
        for ext in ["json", "csv", "md"] {
            assert!(dir.path().join(format!("ev/{f}.{ext}")).exists());
        }
    }
}

fn projected(path: PathBuf) -> Vec<(Value, Value, Value, Value, Value)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let score = v["adjusted_score"].as_f64().or(v["score"].as_f64()).unwrap();
            (v["image_id"].clone(), v["box_global"].clone(), score.into(), v["class_id"].clone(), v["tile"].clone())
        })
        .collect()
}

#[test]
fn merge_modes_agree_when_lambda_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, sim) = synth(dir.path(), "boundary");
    let common = ["--dataset", coco.as_str(), "--backend", "sim", "--backend-sim", sim.as_str(), "--no-timing"];
    let mut args = vec!["run", "--strategy", "tile-overlap-tatm", "--raw", "--out", "r"];
    args.extend(common);
    ok(dir.path(), &args);
    ok(dir.path(), &["merge", "--detections", "r/raw.jsonl", "--mode", "nms", "--out", "nms.jsonl"]);
    ok(
        dir.path(),
        &["merge", "--detections", "r/raw.jsonl", "--mode", "tatm", "--lambda", "0", "--dataset", &coco, "--out", "t0.jsonl"],
    );
    ok(dir.path(), &["plan", "--dataset", &coco, "--out", "grids.json"]);
    ok(
        dir.path(),
        &["merge", "--detections", "r/raw.jsonl", "--mode", "tatm", "--grid", "grids.json", "--out", "t.jsonl"],
    );
    let nms = projected(dir.path().join("nms.jsonl"));
    assert!(!nms.is_empty());
    assert_eq!(nms, projected(dir.path().join("t0.jsonl")));
    assert_eq!(fs::read(dir.path().join("t.jsonl")).unwrap(), fs::read(dir.path().join("r/detections.jsonl")).unwrap());

    let out = run(dir.path(), &["merge", "--detections", "r/raw.jsonl", "--mode", "tatm", "--out", "x.jsonl"]);
    assert!(stderr_line(&out).contains("--grid"));
}

#[test]
fn outputs_are_idempotent_and_echo_config() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, sim) = synth(dir.path(), "adversarial");
    fs::write(dir.path().join("run.cfg"), "# test\ntau = 8\nlambda = 0.3\nbackend.kind = sim\n").unwrap();
    let a = [
        "compare", "--dataset", &coco, "--config", "run.cfg", "--lambda", "0.2", "--backend-sim", &sim, "--no-timing", "--out",
        "c",
    ];
    ok(dir.path(), &a);
    let first: Vec<Vec<u8>> = ["comparison.json", "comparison.csv", "comparison.md", "manifests.json"]
        .iter()
        .map(|f| fs::read(dir.path().join("c").join(f)).unwrap())
        .collect();
    ok(dir.path(), &a);
    for (f, bytes) in ["comparison.json", "comparison.csv", "comparison.md", "manifests.json"].iter().zip(first) {
        assert_eq!(fs::read(dir.path().join("c").join(f)).unwrap(), bytes, "{f}");
    }
    let m = read_json(dir.path().join("c/manifests.json"));
    assert_eq!(m.as_array().unwrap().len(), 5);
    let cfg = &m[0]["config"];
    assert_eq!(cfg["tau"], "8.000000");
    assert_eq!(cfg["lambda"], "0.200000");
    assert_eq!(cfg["backend.kind"], "sim");
    assert_eq!(m[0]["params_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m[0]["params_hash"], m[4]["params_hash"]);
}

#[test]
fn jobs_and_subprocess_backend_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, sim) = synth(dir.path(), "boundary");
    let base = ["compare", "--dataset", coco.as_str(), "--backend-sim", sim.as_str(), "--no-timing"];
    let mut one = base.to_vec();
    one.extend(["--backend", "sim", "--jobs", "1", "--out", "j1"]);
    ok(dir.path(), &one);
    let mut eight = base.to_vec();
    eight.extend(["--backend", "sim", "--jobs", "8", "--out", "j8"]);
    ok(dir.path(), &eight);
    let cmd = format!("'{}' serve-sim --dataset {coco} --backend-sim {sim}", bin());
    let mut sub = base.to_vec();
    sub.extend(["--backend", "subprocess", "--backend-cmd", cmd.as_str(), "--out", "sp"]);
    ok(dir.path(), &sub);
    for f in ["comparison", "small_defect_recall", "boundary_recall"] {
        for ext in ["json", "csv", "md"] {
            let name = format!("{f}.{ext}");
            let j1 = fs::read(dir.path().join("j1").join(&name)).unwrap();
            assert_eq!(j1, fs::read(dir.path().join("j8").join(&name)).unwrap(), "{name}");
            assert_eq!(j1, fs::read(dir.path().join("sp").join(&name)).unwrap(), "{name}");
        }
    }
}

#[test]
fn empty_precomputed_directory_yields_zero_recall() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, _) = synth(dir.path(), "adversarial");
    fs::create_dir(dir.path().join("dets")).unwrap();
    ok(
        dir.path(),
        &["run", "--dataset", &coco, "--strategy", "tile-overlap-tatm", "--backend-dir", "dets", "--out", "r"],
    );
    assert_eq!(fs::read_to_string(dir.path().join("r/detections.jsonl")).unwrap(), "");
    ok(dir.path(), &["eval", "--detections", "r/detections.jsonl", "--dataset", &coco, "--out", "ev"]);
    let r = read_json(dir.path().join("ev/comparison.json"));
    assert_eq!(r["reports"][0]["operating_point"]["recall"].as_f64(), Some(0.0));
}

#[test]
fn slice_writes_labels_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, _) = synth(dir.path(), "boundary");
    ok(dir.path(), &["slice", "--dataset", &coco, "--out", "tiles"]);
    let s = read_json(dir.path().join("tiles/slice_summary.json"));
    assert_eq!(s["summary"]["tiles"].as_u64(), Some(4 * 25));
    let labels = fs::read_dir(dir.path().join("tiles/labels")).unwrap().count();
    assert_eq!(labels, 100);
    ok(dir.path(), &["slice", "--dataset", &coco, "--format", "coco-json", "--split", "train", "--out", "tiles_coco"]);
    let s = read_json(dir.path().join("tiles_coco/slice_summary.json"));
    assert_eq!(s["dataset_id"], "annotations-train");
    assert_eq!(s["summary"]["images"].as_u64(), Some(2));
    assert!(dir.path().join("tiles_coco/annotations.json").exists());
}

#[test]
fn sweep_and_stats_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (coco, sim) = synth(dir.path(), "boundary");
    ok(
        dir.path(),
        &[
            "sweep", "--dataset", &coco, "--backend", "sim", "--backend-sim", &sim, "--taus", "16,32", "--lambdas", "0.2,0.4",
            "--no-timing", "--out", "sw",
        ],
    );
    let s = read_json(dir.path().join("sw/sweep.json"));
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[3]["boosted"].as_u64() >= rows[1]["boosted"].as_u64());
    ok(dir.path(), &["stats", "--dataset", &coco, "--out", "st"]);
    let st = read_json(dir.path().join("st/stats.json"));
    assert_eq!(st["annotations"].as_u64(), Some(160));
    assert_eq!(st["apparent_area"].as_array().unwrap().len(), 3);
}

#[cfg(feature = "imageio")]
#[test]
fn rendered_boards_give_tile_crops() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--suite", "adversarial", "--render", "--out", "syn"]);
    assert!(dir.path().join("syn/adversarial_0001.png").exists());
    ok(dir.path(), &["slice", "--dataset", "syn/annotations.json", "--crops", "--out", "tiles"]);
    let crops = fs::read_dir(dir.path().join("tiles/images")).unwrap().count();
    assert_eq!(crops, 2);
}
