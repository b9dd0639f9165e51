use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hopf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopf-hybrid"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

/// Small enough to train in seconds while still exercising every stage.
const MICRO_CONFIG: &str = r#"{
  "criticality": "supercritical",
  "n_h": 5,
  "n_points": 60,
  "map_hidden": [8],
  "speed": {"kind": "harmonic", "n_h": 2, "hidden": [8]},
  "stage1": {"adam_iters": 40, "adam_lr": 0.02, "lbfgs_iters": 40, "lbfgs_step": 0.01},
  "stage2": {"adam_iters": 40, "adam_lr": 0.01, "lbfgs_iters": 40, "lbfgs_step": 0.00001},
  "stage3": {"adam_iters": 40, "adam_lr": 0.01, "lbfgs_iters": 40, "lbfgs_step": 0.00001},
  "seed": 7,
  "downsample": 200
}"#;

#[test]
fn unknown_system_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = hopf(
        dir.path(),
        &["gen-data", "--system", "lorenz", "--out", "data"],
    );
    assert_code(&out, 2);
}

#[test]
fn settle_flag_is_rejected_for_the_aero_system() {
    let dir = TempDir::new().unwrap();
    let out = hopf(
        dir.path(),
        &[
            "gen-data",
            "--system",
            "aero",
            "--out",
            "data",
            "--settle",
            "10",
        ],
    );
    assert_code(&out, 2);
}

#[test]
fn missing_config_field_is_named_in_the_error() {
    let dir = TempDir::new().unwrap();
    let gen = hopf(
        dir.path(),
        &[
            "gen-data",
            "--system",
            "vdp",
            "--out",
            "data",
            "--mu",
            "0.5",
            "--settle",
            "40",
        ],
    );
    assert_code(&gen, 0);
    let broken = MICRO_CONFIG.replace("\"n_h\": 5,", "");
    fs::write(dir.path().join("broken.json"), broken).unwrap();
    let out = hopf(
        dir.path(),
        &[
            "train", "--data", "data", "--config", "broken.json", "--out", "m.json",
        ],
    );
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("n_h"), "stderr: {stderr}");
}

#[test]
fn pipeline_round_trip_obeys_the_exit_code_contract() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("micro.json"), MICRO_CONFIG).unwrap();

    let gen = hopf(
        d,
        &[
            "gen-data",
            "--system",
            "vdp",
            "--out",
            "data",
            "--mu",
            "0.4,0.7,1.0",
            "--settle",
            "40",
        ],
    );
    assert_code(&gen, 0);
    assert!(d.join("data/manifest.json").is_file());
    assert!(d.join("data/record_02.csv").is_file());

    let train = hopf(
        d,
        &[
            "train",
            "--data",
            "data",
            "--config",
            "micro.json",
            "--out",
            "model.json",
        ],
    );
    assert_code(&train, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("model.report.json")).unwrap()).unwrap();
    assert!(report["stage3"]["final_loss"].is_f64());
    assert!(report["mu0"].is_f64());

    // Same data, same seed, second run: the model file is reproduced byte
    // for byte.
    let again = hopf(
        d,
        &[
            "train",
            "--data",
            "data",
            "--config",
            "micro.json",
            "--out",
            "model2.json",
        ],
    );
    assert_code(&again, 0);
    assert_eq!(
        fs::read(d.join("model.json")).unwrap(),
        fs::read(d.join("model2.json")).unwrap()
    );

    // The TOML spelling of the same configuration trains the same model.
    let toml_cfg = r#"
criticality = "supercritical"
n_h = 5
n_points = 60
map_hidden = [8]
seed = 7
downsample = 200

[speed]
kind = "harmonic"
n_h = 2
hidden = [8]

[stage1]
adam_iters = 40
adam_lr = 0.02
lbfgs_iters = 40
lbfgs_step = 0.01

[stage2]
adam_iters = 40
adam_lr = 0.01
lbfgs_iters = 40
lbfgs_step = 0.00001

[stage3]
adam_iters = 40
adam_lr = 0.01
lbfgs_iters = 40
lbfgs_step = 0.00001
"#;
    fs::write(d.join("micro.toml"), toml_cfg).unwrap();
    let toml_train = hopf(
        d,
        &[
            "train",
            "--data",
            "data",
            "--config",
            "micro.toml",
            "--out",
            "model_toml.json",
        ],
    );
    assert_code(&toml_train, 0);
    assert_eq!(
        fs::read(d.join("model.json")).unwrap(),
        fs::read(d.join("model_toml.json")).unwrap()
    );

    let diagram = hopf(
        d,
        &[
            "predict-bifurcation",
            "--model",
            "model.json",
            "--mu-min",
            "0.0",
            "--mu-max",
            "1.0",
            "--steps",
            "9",
            "--out",
            "diagram.csv",
        ],
    );
    assert_code(&diagram, 0);
    let text = fs::read_to_string(d.join("diagram.csv")).unwrap();
    assert!(text.starts_with("mu,branch,amp_max,a0,marker\n"));
    assert!(text.contains(",hopf\n"));

    let single = hopf(
        d,
        &[
            "predict-bifurcation",
            "--model",
            "model.json",
            "--mu-min",
            "0.6",
            "--mu-max",
            "0.6",
            "--steps",
            "1",
            "--out",
            "single.csv",
        ],
    );
    assert_code(&single, 0);
    assert_eq!(line_count(&d.join("single.csv")), 2);

    // A window with no cycles still produces the file, but signals the
    // empty result.
    let empty = hopf(
        d,
        &[
            "predict-bifurcation",
            "--model",
            "model.json",
            "--mu-min",
            "-5",
            "--mu-max",
            "-2",
            "--steps",
            "3",
            "--out",
            "empty.csv",
        ],
    );
    assert_code(&empty, 2);
    assert_eq!(line_count(&d.join("empty.csv")), 1);

    let orbit = hopf(
        d,
        &[
            "predict-orbit",
            "--model",
            "model.json",
            "--mu",
            "0.6",
            "--stability",
            "stable",
            "--points",
            "12",
            "--out",
            "orbit.csv",
        ],
    );
    assert_code(&orbit, 0);
    let orbit_text = fs::read_to_string(d.join("orbit.csv")).unwrap();
    assert!(orbit_text.starts_with("theta,z1_hat,z2_hat,mu\n"));
    assert_eq!(orbit_text.lines().count(), 13);

    let no_branch = hopf(
        d,
        &[
            "predict-orbit",
            "--model",
            "model.json",
            "--mu",
            "0.6",
            "--stability",
            "unstable",
            "--out",
            "no.csv",
        ],
    );
    assert_code(&no_branch, 4);

    let ts = hopf(
        d,
        &[
            "predict-timeseries",
            "--model",
            "model.json",
            "--mu",
            "0.6",
            "--stability",
            "stable",
            "--tmax",
            "2",
            "--dt",
            "0.05",
            "--out",
            "ts.csv",
        ],
    );
    assert_code(&ts, 0);
    let ts_text = fs::read_to_string(d.join("ts.csv")).unwrap();
    assert!(ts_text.starts_with("t,z1_hat,z2_hat,mu\n"));
    assert_eq!(ts_text.lines().count(), 1 + 41);

    let eval = hopf(
        d,
        &[
            "eval",
            "--model",
            "model.json",
            "--data",
            "data",
            "--out",
            "metrics.json",
        ],
    );
    assert_code(&eval, 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["records"].as_array().unwrap().len(), 3);
    assert!(metrics["min_abs_det"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["fingerprint_match"], serde_json::Value::Bool(true));

    fs::write(d.join("corrupt.json"), "{ not json").unwrap();
    let bad_eval = hopf(
        d,
        &[
            "eval",
            "--model",
            "corrupt.json",
            "--data",
            "data",
            "--out",
            "nope.json",
        ],
    );
    assert_code(&bad_eval, 2);

    let cv = hopf(
        d,
        &[
            "cross-validate",
            "--data",
            "data",
            "--config",
            "micro.json",
            "--out",
            "cv.json",
        ],
    );
    assert_code(&cv, 0);
    let cv_report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cv.json")).unwrap()).unwrap();
    assert_eq!(cv_report["n_folds"], serde_json::Value::from(3));
    assert_eq!(cv_report["folds"].as_array().unwrap().len(), 3);
    for fold in cv_report["folds"].as_array().unwrap() {
        assert!(fold["mu0"].is_f64(), "fold: {fold}");
        assert!(fold["held_out_shape_error"].is_f64(), "fold: {fold}");
    }
}
