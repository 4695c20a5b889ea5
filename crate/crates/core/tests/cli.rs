use std::path::Path;
use std::process::{Command, Output};

use pyror::graph::LayerGraph;

fn pyror(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyror")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn describe_matches_golden_files() {
    let o = pyror(&["describe", "--depth", "8", "--alpha", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), golden("describe_d8_a3.txt"));
    let o = pyror(&["describe", "--depth", "8", "--alpha", "3", "--json", "-"]);
    assert_eq!(stdout(&o), golden("describe_d8_a3.json"));
}

fn key_paths(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
    if let Some(map) = v.as_object() {
        for (k, child) in map {
            let p = format!("{prefix}/{k}");
            out.push(p.clone());
            key_paths(child, &p, out);
        }
    }
}

#[test]
fn describe_json_schema_is_stable_across_configs() {
    let reference: serde_json::Value = serde_json::from_str(&golden("describe_d8_a3.json")).unwrap();
    let mut want = Vec::new();
    key_paths(&reference, "", &mut want);
    for args in [["110", "48"], ["110", "270"], ["146", "270"]] {
        let o = pyror(&["describe", "--depth", args[0], "--alpha", args[1], "--json", "-"]);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let mut got = Vec::new();
        key_paths(&v, "", &mut got);
        assert_eq!(got, want, "{args:?}");
    }
}

#[test]
fn describe_reports_paper_configurations() {
    let o = pyror(&["describe", "--depth", "110", "--alpha", "48", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["final_blocks"], 54);
    assert_eq!(v["final_width"], 64);
    let params = v["total_params"].as_f64().unwrap();
    assert!((params / 1.7e6 - 1.0).abs() < 0.05);

    let o = pyror(&["describe", "--depth", "110", "--alpha", "270", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["final_width"], 286);
}

#[test]
fn invalid_depth_is_a_validation_failure() {
    let o = pyror(&["describe", "--depth", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth must be 6n+2"));
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_flags_and_values_are_rejected() {
    assert_eq!(pyror(&["describe", "--widen", "3"]).status.code(), Some(1));
    assert_eq!(pyror(&["describe", "--block-variant", "c"]).status.code(), Some(1));
    assert_eq!(pyror(&[]).status.code(), Some(1));
    assert_eq!(pyror(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("arch.cfg");
    std::fs::write(&cfg, "depth = 14\nalpha = 9\nblock_variant = pre-act\n").unwrap();
    let o = pyror(&["describe", "--config", cfg.to_str().unwrap(), "--alpha", "12", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["depth"], 14);
    assert_eq!(v["alpha"], 12);
    assert_eq!(v["variant"], "pre-act");

    std::fs::write(&cfg, "depth = 14\nwidth = 9\n").unwrap();
    let o = pyror(&["describe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sample_sd_is_deterministic() {
    let args = ["sample-sd", "--blocks", "54", "--p-terminal", "0.5", "--seed", "1", "--draws", "3"];
    let a = pyror(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, pyror(&args).stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let masks = v["masks"].as_array().unwrap();
    assert_eq!(masks.len(), 3);
    assert!(masks.iter().all(|m| m.as_array().unwrap().len() == 54));
    assert_eq!(v["probs"][53], 0.5);
    assert_eq!(v["probs"][26], 0.75);
    assert_ne!(a.stdout, pyror(&["sample-sd", "--blocks", "54", "--seed", "2", "--draws", "3"]).stdout);
}

#[test]
fn export_then_import_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let o = pyror(&["export", "--depth", "8", "--alpha", "0", "-o", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let imported = LayerGraph::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let built = pyror::graph::build_graph(&pyror::archspec::ArchConfig::new(
        8,
        0,
        pyror::archspec::BlockVariant::PyramidBn,
    ))
    .unwrap();
    assert_eq!(imported, built);

    let o = pyror(&["validate", "--graph", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["valid"], true);
}

#[test]
fn validate_rejects_tampered_graph() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    pyror(&["export", "--depth", "8", "--alpha", "3", "-o", path.to_str().unwrap()]);
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    // Drop the last input of the root-level Add.
    let nodes = doc["nodes"].as_array_mut().unwrap();
    let root = nodes.iter_mut().find(|n| n["kind"] == "add" && n["level"] == "root").unwrap();
    root["inputs"].as_array_mut().unwrap().pop();
    std::fs::write(&path, doc.to_string()).unwrap();
    let o = pyror(&["validate", "--graph", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_prints_pass_line() {
    let o = pyror(&["gradcheck", "--depth", "8", "--alpha", "3", "--variant", "pyramid-bn"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "max rel err < 1e-4: PASS\n");
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = pyror(&[
        "train",
        "--depth",
        "8",
        "--alpha",
        "3",
        "--num-classes",
        "2",
        "--preset",
        "smoke",
        "--epochs",
        "2",
        "--synthetic-per-class",
        "24",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(std::fs::read_to_string(out.join("run.ndjson")).unwrap(), stdout(&o));

    let o = pyror(&[
        "eval",
        "--checkpoint",
        out.join("final.ckpt").to_str().unwrap(),
        "--synthetic-per-class",
        "24",
        "--stats",
        out.join("stats.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["top1_error"].as_f64().unwrap() <= 1.0);
    assert!(v["mean_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn training_config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = pyror(&["train", "--depth", "8", "--alpha", "3", "--train-config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
