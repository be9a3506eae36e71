//! End-to-end runs of the `gradeline` binary.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_gradeline");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn gradeline(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("GRADELINE_CONFIG").output().unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small generated set and an SVM trained on all of it.
struct Trained {
    dir: PathBuf,
    manifest: PathBuf,
    model: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        json_of(&gradeline(&["generate", "--out", s(&data), "--per-class", "15", "--seed", "5"]));
        let manifest = data.join("manifest.jsonl");
        let model = dir.join("svm.json");
        json_of(&gradeline(&["train", "--manifest", s(&manifest), "--algorithm", "svm", "--out", s(&model), "--test-fraction", "0"]));
        Trained { dir, manifest, model }
    })
}

fn truth_records(manifest: &Path) -> Vec<Value> {
    let text = std::fs::read_to_string(manifest.with_file_name("truth.jsonl")).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn generate_counts_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let summary = json_of(&gradeline(&["generate", "--out", s(dir), "--per-class", "10", "--seed", "9"]));
        assert_eq!(summary["entries"], 30);
        assert_eq!(summary["by_label"]["Ripened"], 10);
    }
    for name in ["manifest.jsonl", "truth.jsonl", "original_00000.png", "original_00029.png"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = tmp.path().join("c");
    json_of(&gradeline(&["generate", "--out", s(&c), "--per-class", "10", "--seed", "10"]));
    assert_ne!(std::fs::read(a.join("original_00000.png")).unwrap(), std::fs::read(c.join("original_00000.png")).unwrap());

    let empty = tmp.path().join("empty");
    let out = gradeline(&["generate", "--out", s(&empty), "--per-class", "0"]);
    assert_eq!(json_of(&out)["entries"], 0);
    assert_eq!(std::fs::read_to_string(empty.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn augment_extends_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    json_of(&gradeline(&["generate", "--out", s(&data), "--per-class", "2"]));
    let aug = tmp.path().join("aug");
    let summary = json_of(&gradeline(&[
        "augment", "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&aug), "--rotation", "3", "--flipping", "2", "--shifting", "1", "--seed", "1",
    ]));
    assert_eq!(summary["entries"], 12);
    assert_eq!(summary["by_tag"]["rotation"], 3);
    // The combined manifest resolves from its own directory.
    let model = tmp.path().join("nb.json");
    json_of(&gradeline(&["train", "--manifest", s(&aug.join("manifest.jsonl")), "--algorithm", "nb", "--variant", "B", "--out", s(&model), "--test-fraction", "0"]));
}

#[test]
fn train_records_parameters_and_is_repeatable() {
    let t = trained();
    let model: Value = serde_json::from_str(&std::fs::read_to_string(&t.model).unwrap()).unwrap();
    assert_eq!(model["variant"], "A");
    assert_eq!(model["model"]["algorithm"], "svm");
    assert_eq!(model["model"]["params"]["gamma"], 0.005);
    assert_eq!(model["model"]["params"]["c"], 1000.0);

    let run = |name: &str| {
        let path = t.dir.join(name);
        let mut report = json_of(&gradeline(&["train", "--manifest", s(&t.manifest), "--algorithm", "rf", "--trees", "15", "--seed", "3", "--out", s(&path)]));
        report.as_object_mut().unwrap().remove("timings");
        report.as_object_mut().unwrap().remove("model");
        (report, std::fs::read(path).unwrap())
    };
    let (r1, m1) = run("rf1.json");
    let (r2, m2) = run("rf2.json");
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert_eq!((r1["train_size"].as_u64(), r1["test_size"].as_u64()), (Some(36), Some(9)));
    assert!(r1["heldout"]["accuracy"].is_number());
}

#[test]
fn train_rejects_bad_input() {
    let t = trained();
    let out = gradeline(&["train", "--manifest", s(&t.manifest), "--algorithm", "knn", "--k", "1000", "--out", s(&t.dir.join("knn.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds"));
    let out = gradeline(&["train", "--manifest", "/nonexistent/manifest.jsonl", "--algorithm", "nb", "--out", s(&t.dir.join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = gradeline(&["train", "--manifest", s(&t.manifest), "--algorithm", "svm", "--gamma", "-1", "--out", s(&t.dir.join("x.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = gradeline(&["train", "--manifest", s(&t.manifest), "--algorithm", "perceptron", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_model_on_manifest() {
    let t = trained();
    let knn = t.dir.join("knn1.json");
    json_of(&gradeline(&["train", "--manifest", s(&t.manifest), "--algorithm", "knn", "--k", "1", "--test-fraction", "0", "--out", s(&knn)]));
    let report = json_of(&gradeline(&["eval", "--model", s(&knn), "--manifest", s(&t.manifest)]));
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["total"], 45);

    let out = gradeline(&["eval", "--model", s(&knn), "--manifest", s(&t.manifest), "--variant", "B"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));
    let out = gradeline(&["--pretty", "eval", "--model", s(&knn), "--manifest", s(&t.manifest)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy 100.00%"));
}

#[test]
fn eval_replays_reference_confusion_counts() {
    let report = json_of(&gradeline(&["eval", "--confusion", s(&fixture("first_layer_confusion.json"))]));
    assert!((report["accuracy"].as_f64().unwrap() - 0.985).abs() < 1e-12);
    let pretty = gradeline(&["--pretty", "eval", "--confusion", s(&fixture("first_layer_confusion.json"))]);
    assert!(String::from_utf8_lossy(&pretty.stdout).contains("98.50%"));
    let report = json_of(&gradeline(&["eval", "--confusion", s(&fixture("second_layer_confusion.json"))]));
    assert_eq!(report["total"], 63);
}

#[test]
fn eval_detection_hand_case() {
    let (dets, truth) = (fixture("ap_detections.json"), fixture("ap_truth.json"));
    let args = ["eval", "--detections", s(&dets), "--truth", s(&truth)];
    let result = json_of(&gradeline(&args));
    assert!((result["ap"].as_f64().unwrap() - 0.8056).abs() < 5e-5);
    assert_eq!((result["tp"].as_u64(), result["fp"].as_u64(), result["fn"].as_u64()), (Some(3), Some(1), Some(0)));
    let mut all_point = args.to_vec();
    all_point.extend(["--interpolation", "all-point"]);
    assert!(json_of(&gradeline(&all_point))["ap"].as_f64().unwrap() >= 29.0 / 36.0);

    let out = gradeline(&["eval", "--detections", s(&fixture("ap_detections.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = gradeline(&["eval"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grade_exit_codes_follow_routes() {
    let t = trained();
    let records = truth_records(&t.manifest);
    let data = t.manifest.parent().unwrap();
    let image_of = |label: &str| data.join(records.iter().find(|r| r["label"] == label).unwrap()["path"].as_str().unwrap());

    let out = gradeline(&["grade", s(&image_of("Unripened")), "--model", s(&t.model)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((result["label"].as_str(), result["route"].as_str()), (Some("Unripened"), Some("Market")));
    assert_eq!(result["layer2_invoked"], false);

    let out = gradeline(&["grade", s(&image_of("Overripened")), "--model", s(&t.model)]);
    assert_eq!(out.status.code(), Some(2));

    let out = gradeline(&["grade", s(&image_of("Ripened")), "--model", s(&t.model)]);
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((result["label"].as_str(), result["layer2_invoked"].as_bool()), (Some("Ripened"), Some(true)));

    let out = gradeline(&["grade", "/nonexistent.png", "--model", s(&t.model)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.png"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let t = trained();
    let cfg = t.dir.join("settings.json");
    std::fs::write(&cfg, r#"{"svm": {"c": 10.0}, "training": {"test_fraction": 0.0}}"#).unwrap();
    let model_c = |extra: &[&str], name: &str| {
        let path = t.dir.join(name);
        let mut args = vec!["--config", s(&cfg), "train", "--manifest", s(&t.manifest), "--algorithm", "svm", "--out", s(&path)];
        args.extend_from_slice(extra);
        let report = json_of(&gradeline(&args));
        (report["params"]["c"].as_f64().unwrap(), report["test_size"].as_u64().unwrap())
    };
    assert_eq!(model_c(&[], "c_file.json"), (10.0, 0));
    assert_eq!(model_c(&["--c", "5"], "c_flag.json"), (5.0, 0));

    // The environment variable names the same file.
    let out = Command::new(BIN)
        .args(["eval", "--confusion", s(&fixture("second_layer_confusion.json"))])
        .env("GRADELINE_CONFIG", t.dir.join("missing.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    std::fs::write(&cfg, r#"{"svm": {"c": 10.0}, "typo": 1}"#).unwrap();
    let out = gradeline(&["--config", s(&cfg), "eval", "--confusion", s(&fixture("second_layer_confusion.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

/// Spawns a service and reads its address announcement.
fn spawn_service(args: &[&str]) -> (Child, Value, BufReader<std::process::ChildStdout>) {
    let mut child = Command::new(BIN).args(args).env_remove("GRADELINE_CONFIG").stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let announced = serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad announcement {line:?}: {e}"));
    (child, announced, stdout)
}

fn terminate(child: &mut Child) -> std::process::ExitStatus {
    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    child.wait().unwrap()
}

#[test]
fn services_and_simulator_run_end_to_end() {
    let t = trained();
    let (mut cloud, c, _cloud_out) = spawn_service(&["serve-cloud", "--port", "0"]);
    let cloud_addr = c["addr"].as_str().unwrap().to_string();
    let events = t.dir.join("events.jsonl");
    let (mut edge, e, mut edge_out) = spawn_service(&[
        "serve-edge", "--model", s(&t.model), "--port", "0", "--http-port", "0", "--cloud-addr", &cloud_addr, "--event-log", s(&events),
    ]);
    let line_addr = e["line_addr"].as_str().unwrap();
    assert!(e["http_addr"].is_string());

    let log = t.dir.join("routes.jsonl");
    let report = json_of(&gradeline(&["simulate", "--edge-addr", line_addr, "--items", "9", "--rate", "30", "--seed", "2", "--log", s(&log)]));
    assert_eq!((report["emitted"].as_u64(), report["routed"].as_u64(), report["dropped"].as_u64()), (Some(9), Some(9), Some(0)));
    assert!(report["line_accuracy"].is_number());
    let routes: Vec<Value> = std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(routes.len(), 9);
    assert!(routes.iter().all(|r| r["route"].is_string() && r["truth"]["label"].is_string()));

    // A second service on a taken port fails cleanly.
    let out = gradeline(&["serve-cloud", "--port", cloud_addr.rsplit(':').next().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bind"));

    assert!(terminate(&mut edge).success());
    let mut stats = String::new();
    edge_out.read_line(&mut stats).unwrap();
    let stats: Value = serde_json::from_str(&stats).unwrap();
    assert_eq!(stats["frames"], 9);
    let logged = std::fs::read_to_string(&events).unwrap();
    let kinds: Vec<String> = logged.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string()).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "grade").count(), 9);
    assert_eq!(kinds.iter().filter(|k| *k == "switch").count(), 9);
    assert!(terminate(&mut cloud).success());
}
