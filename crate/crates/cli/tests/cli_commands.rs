use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modalreg::dataset::{self, Layout};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modalreg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn err(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// 2 x 7 x 10 = 140 point 3-bus sweep with a single fully grown tree setting.
fn small_config(dir: &Path, models: &[&str]) -> PathBuf {
    let models: Vec<String> = models.iter().map(|m| format!("\"{m}\"")).collect();
    let text = format!(
        r#"{{
  "version": 1,
  "system": {{"builtin": "three_bus"}},
  "grid": [
    {{"feature": "S_SGshare", "values": [{{"sg_mva": 500}}, {{"sg_mva": 200}}]}},
    {{"feature": "tau_v", "values": [0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 1.0]}},
    {{"feature": "R", "values": [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1]}}
  ],
  "models": [{}],
  "hyper_grid": {{"max_depth": [null], "min_samples_leaf": [1], "min_samples_split": [2], "ccp_alpha_rel": [0.0]}},
  "ensemble": {{"n_trees": 8, "bootstrap": true}},
  "seed": 3,
  "test_grid": [
    {{"feature": "S_SGshare", "values": [{{"sg_mva": 330}}]}},
    {{"feature": "tau_v", "values": [0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95]}},
    {{"feature": "R", "values": [0.05]}}
  ],
  "predict_point": {{"S_SGshare": {{"sg_mva": 330}}, "tau_v": 0.65, "R": 0.05}},
  "partition_plots": [{{"model": "MO-DT", "output": "re_l2", "x": "S_SGshare", "y": "tau_v"}}],
  "out_dir": "out"
}}"#,
        models.join(", ")
    );
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

fn count_class(svg: &str, class: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).expect("valid XML");
    doc.descendants().filter(|n| n.attribute("class") == Some(class)).count()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_three_databases() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["MO-DT"]);
    let stdout = ok(&run(&["generate", "--config", cfg.to_str().unwrap()]));
    assert!(stdout.contains("140 points"), "{stdout}");
    let db = dir.path().join("out/db");
    for stem in ["three_bus_poles_re", "three_bus_poles_im", "three_bus_pf_full"] {
        assert!(db.join(format!("{stem}.csv")).exists());
        assert!(db.join(format!("{stem}.json")).exists());
    }
    let report = json(&db.join("generate_report.json"));
    let files = report["files"].as_array().unwrap();
    assert_eq!(files.len(), 6);
    assert!(files.iter().all(|f| f.as_str().unwrap().starts_with("db")));
    let pf = dataset::load(&db.join("three_bus_pf_full.csv")).unwrap();
    assert_eq!(pf.n_rows(), 140 * 22);
}

#[test]
fn empty_grid_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["MO-DT"]);
    let mut v = json(&cfg);
    v["grid"] = serde_json::json!([]);
    fs::write(&cfg, v.to_string()).unwrap();
    let e = err(&run(&["generate", "--config", cfg.to_str().unwrap()]));
    assert!(e.contains("grid"), "{e}");
}

#[test]
fn missing_inputs_are_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["MO-DT"]);
    let e = err(&run(&["train", "--config", cfg.to_str().unwrap()]));
    assert!(e.contains("three_bus_poles_re.csv"), "{e}");
    let e = err(&run(&["generate", "--config", dir.path().join("nope.json").to_str().unwrap()]));
    assert!(e.contains("nope.json"), "{e}");
    let e = err(&run(&["train", "--config", cfg.to_str().unwrap(), "--models", "XYZ"]));
    assert!(e.contains("XYZ"), "{e}");
}

#[test]
fn train_file_counts_and_evaluation_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["SO-DT", "MO-DT", "MO-DT-I", "2DLA"]);
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c]));
    ok(&run(&["train", "--config", c]));
    let models = dir.path().join("out/models");
    let count = |m: &str| fs::read_dir(models.join(m)).unwrap().count();
    assert_eq!(count("SO-DT"), 44);
    assert_eq!(count("MO-DT"), 2);
    assert_eq!(count("MO-DT-I"), 22);
    let report = json(&models.join("train_report.json"));
    assert_eq!(report["models"].as_array().unwrap().len(), 4);

    let stdout = ok(&run(&["evaluate", "--config", c]));
    for m in ["SO-DT", "MO-DT", "MO-DT-I", "2DLA"] {
        assert!(stdout.contains(m), "{stdout}");
    }
    let reports = dir.path().join("out/reports");
    let eval = json(&reports.join("eval_report.json"));
    assert_eq!(eval["models"].as_array().unwrap().len(), 4);
    assert_eq!(eval["exact"].as_array().unwrap().len(), 7);
    for m in ["SO-DT", "MO-DT", "2DLA"] {
        let svg = fs::read_to_string(reports.join(format!("modal_map_{m}.svg"))).unwrap();
        assert_eq!(count_class(&svg, "marker exact"), 7 * 22);
        assert_eq!(count_class(&svg, "marker predicted"), 7 * 22);
    }
    let part = fs::read_to_string(reports.join("partition_MO-DT_re_l2_S_SGshare_tau_v.svg")).unwrap();
    assert!(count_class(&part, "region") > 1);
}

#[test]
fn predict_at_training_point_returns_stored_row() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["MO-DT"]);
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c]));
    ok(&run(&["train", "--config", c]));
    let re = dataset::load(&dir.path().join("out/db/three_bus_poles_re.csv")).unwrap();
    let im = dataset::load(&dir.path().join("out/db/three_bus_poles_im.csv")).unwrap();
    let row = 37;
    let x = re.x_row(row);
    let point = format!("S_SGshare={},tau_v={},R={}", x[0], x[1], x[2]);
    let stdout = ok(&run(&["predict", "--config", c, "--point", &point]));
    assert!(stdout.contains("ratio"), "{stdout}");
    let pred = json(&dir.path().join("out/predict/prediction.json"));
    let poles = pred["poles"].as_array().unwrap();
    assert_eq!(poles.len(), 22);
    for (k, p) in poles.iter().enumerate() {
        assert_eq!(p["re"].as_f64().unwrap(), re.y[(row, k)]);
        assert_eq!(p["im"].as_f64().unwrap(), im.y[(row, k)]);
    }
    let svg = fs::read_to_string(dir.path().join("out/predict/modal_map.svg")).unwrap();
    assert_eq!(count_class(&svg, "marker predicted"), 22);
    assert_eq!(count_class(&svg, "marker exact"), 22);
}

#[test]
fn splines_refuse_points_outside_the_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["1DLI"]);
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c]));
    ok(&run(&["train", "--config", c]));
    let outside = "S_SGshare=0.45,tau_v=0.5,R=0.5";
    let e = err(&run(&["predict", "--config", c, "--point", outside]));
    assert!(e.contains("outside"), "{e}");
    ok(&run(&["predict", "--config", c, "--point", outside, "--allow-extrapolation"]));
}

#[test]
fn seeds_control_ensembles() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["ENS-MO-DT"]);
    let c = cfg.to_str().unwrap();
    ok(&run(&["generate", "--config", c]));
    let file = dir.path().join("out/models/ENS-MO-DT").join(format!("{}.json", Layout::PolesRe.tag()));
    ok(&run(&["train", "--config", c]));
    let first = fs::read(&file).unwrap();
    ok(&run(&["train", "--config", c]));
    assert_eq!(first, fs::read(&file).unwrap());
    ok(&run(&["train", "--config", c, "--seed", "4"]));
    assert_ne!(first, fs::read(&file).unwrap());
}

#[test]
fn out_and_models_flags_override_the_config() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["SO-DT"]);
    let c = cfg.to_str().unwrap();
    let other = dir.path().join("elsewhere");
    let o = other.to_str().unwrap();
    ok(&run(&["generate", "--config", c, "--out", o]));
    ok(&run(&["train", "--config", c, "--out", o, "--models", "mo-dt"]));
    assert!(other.join("models/MO-DT/poles_re.json").exists());
    assert!(!other.join("models/SO-DT").exists());
    assert!(!dir.path().join("out").exists());
    let stdout = ok(&run(&["map", "--config", c, "--out", o, "--models", "MO-DT"]));
    assert!(stdout.contains("modal_map_sweep.svg"), "{stdout}");
    let svg = fs::read_to_string(other.join("reports/modal_map_sweep.svg")).unwrap();
    assert_eq!(count_class(&svg, "marker exact"), 140 * 22);
}
