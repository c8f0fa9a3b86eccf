use std::fs;
use std::path::Path;

use edgequant::datakit::pnm::{encode, RawImage};
use edgequant::evalkit::EvalReport;

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = edgequant::cli::run(std::iter::once("edgequant").chain(args.iter().copied()), &mut o, &mut e);
    (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const SYNTH: &str = "classes=4,per-class=60,size=16x16,noise=0.1";

/// build, train, calibrate and quantize three ways; returns the model paths
fn pipeline(dir: &Path) -> Vec<(&'static str, String)> {
    let p = |n: &str| path(dir, n);
    let out = ok(&["model", "build", "--family", "tiny", "--classes", "4", "--input-size", "16x16", "--out", &p("init.eqm"), "--seed", "3"]);
    assert!(out.contains("params: "));
    ok(&["train", "--model", &p("init.eqm"), "--synth", SYNTH, "--epochs", "4", "--out", &p("f32.eqm"), "--report", &p("train.json"), "--seed", "3"]);
    ok(&["calibrate", "--model", &p("f32.eqm"), "--synth", SYNTH, "--batches", "4", "--out", &p("stats.txt"), "--seed", "3"]);
    ok(&["quantize", "--model", &p("f32.eqm"), "--mode", "fp16", "--out", &p("fp16.eqm")]);
    ok(&["quantize", "--model", &p("f32.eqm"), "--mode", "dynamic", "--out", &p("dynamic.eqm")]);
    ok(&["quantize", "--model", &p("f32.eqm"), "--mode", "full", "--stats", &p("stats.txt"), "--out", &p("full.eqm")]);
    ["f32", "fp16", "dynamic", "full"].iter().map(|&m| (m, p(&format!("{m}.eqm")))).collect()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let models = pipeline(d);
    let mut reports = vec![];
    for (mode, model) in &models {
        let report = path(d, &format!("{mode}.json"));
        ok(&["eval", "--model", model, "--synth", SYNTH, "--split", "test", "--report", &report, "--seed", "3"]);
        let r = EvalReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r.mode.split('-').next(), Some(*mode));
        assert!(r.accuracy >= 0.9, "{mode}: accuracy {}", r.accuracy);
        assert_eq!(r.sha256.len(), 64);
        assert_eq!(r.config["run"]["seed"], 3, "report lacks the effective config");
        reports.push(report);
    }

    let csv = path(d, "table.csv");
    let mut args = vec!["compare"];
    args.extend(reports.iter().map(String::as_str));
    args.extend(["--out", &csv]);
    let text = ok(&args);
    assert!(text.contains("tiny_cnn"));
    let table = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[0].starts_with("model,"));
    let size = |mode: &str| -> f64 {
        let row = lines.iter().find(|l| l.split(',').nth(2) == Some(mode)).unwrap();
        row.split(',').nth(3).unwrap().parse().unwrap()
    };
    let (f32_mb, fp16_mb, full_mb, dyn_mb) = (size("f32"), size("fp16"), size("full-int"), size("dynamic"));
    assert!(f32_mb > fp16_mb && fp16_mb > full_mb && full_mb >= dyn_mb, "{table}");

    let mut args = vec!["select", "--policy", "size:0.5"];
    args.extend(reports.iter().map(String::as_str));
    let chosen = ok(&args);
    assert!(chosen.contains("tiny_cnn-dynamic"), "{chosen}");

    let (code, _, err) = cli(&["select", "--policy", "size:1.01", &reports[0]]);
    assert_ne!(code, 0);
    assert!(!err.is_empty());

    // inputs are never modified
    let before = fs::read(&models[0].1).unwrap();
    ok(&["quantize", "--model", &models[0].1, "--mode", "fp16", "--out", &path(d, "again.eqm")]);
    assert_eq!(before, fs::read(&models[0].1).unwrap());
    assert_eq!(fs::read(path(d, "again.eqm")).unwrap(), fs::read(&models[1].1).unwrap());
}

#[test]
fn predict_prints_class_and_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = path(d, "m.eqm");
    ok(&["model", "build", "--family", "tiny", "--classes", "3", "--input-size", "16x16", "--out", &model]);
    let img = RawImage { width: 20, height: 12, channels: 3, data: (0..720).map(|i| (i % 256) as f32 / 255.0).collect() };
    let image = path(d, "x.ppm");
    fs::write(&image, encode(&img)).unwrap();
    let out = ok(&["predict", "--model", &model, "--image", &image]);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("prediction: "));
    let probs: Vec<f32> = lines.map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 3);
    assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-3);
}

#[test]
fn vgg16_build_reports_the_parameter_count() {
    let out = ok(&["model", "build", "--family", "vgg16", "--classes", "1000"]);
    assert!(out.contains("params: 138357544"), "{out}");
}

#[test]
fn exit_codes_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let (code, _, err) = cli(&["quantize", "--model", "m.eqm", "--mode", "full", "--out", "q.eqm"]);
    assert_eq!(code, 3);
    assert!(err.contains("calibration stats required"));

    let (code, _, err) = cli(&["train", "--model", "m.eqm"]);
    assert_eq!(code, 1, "{err}");

    let model = path(d, "m.eqm");
    ok(&["model", "build", "--family", "tiny", "--classes", "3", "--input-size", "16x16", "--out", &model]);
    let missing = path(d, "no-such-dir");
    let (code, _, err) = cli(&["eval", "--model", &model, "--data", &missing]);
    assert_eq!(code, 2);
    assert!(err.contains("no-such-dir"), "{err}");

    let junk = path(d, "junk.eqm");
    fs::write(&junk, b"not a model").unwrap();
    let (code, _, err) = cli(&["model", "info", "--model", &junk]);
    assert_eq!(code, 3);
    assert!(err.contains("junk.eqm"), "{err}");

    let (code, _, err) = cli(&["quantize", "--model", &model, "--mode", "int4", "--out", &path(d, "q.eqm")]);
    assert_eq!(code, 1);
    assert!(err.contains("int4"), "{err}");

    let (code, _, _) = cli(&["quantize", "--model", &model, "--mode", "fp16", "--out", &model]);
    assert_ne!(code, 0);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = path(d, "run.toml");
    fs::write(&cfg, "seed = 4\n[model]\nfamily = \"tiny\"\nnum_classes = 3\ninput_size = [16, 16]\n").unwrap();
    let model = path(d, "m.eqm");
    ok(&["model", "build", "--config", &cfg, "--out", &model]);
    let info = ok(&["model", "info", "--model", &model]);
    assert!(info.contains("tiny_cnn"), "{info}");

    fs::write(&cfg, "sede = 4\n").unwrap();
    let (code, _, err) = cli(&["model", "build", "--config", &cfg]);
    assert_eq!(code, 1);
    assert!(err.contains("run.toml"), "{err}");
}
