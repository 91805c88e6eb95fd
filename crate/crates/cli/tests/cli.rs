use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "dates=120",
    "--set",
    "stations=3",
    "--set",
    "history_len=8",
    "--set",
    "horizon=6",
    "--set",
    "n_obs=4",
    "--set",
    "n_nwp=4",
    "--set",
    "n_targets=3",
    "--set",
    "hidden_sizes=8,8",
    "--set",
    "batch_size=16",
    "--set",
    "max_iterations=100",
];

fn duq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = duq(out, args);
    assert!(
        o.status.success(),
        "duq {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["preprocess"]);
    dir
}

#[test]
fn synth_is_reproducible_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["synth", "--seed", "7"]);
    ok(b.path(), &["synth", "--seed", "7"]);
    for f in ["records.csv", "truth.csv", "synth.config"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn invalid_rate_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = duq(&out, &["synth", "--set", "block_rate=1.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unknown_setting_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = duq(dir.path(), &["synth", "--set", "no_such_key=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn missing_tensor_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = duq(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.bin"));
}

#[test]
fn full_pipeline_with_custom_z() {
    let dir = prepared();
    let p = dir.path();
    let train = ok(p, &["train"]);
    assert!(train.contains("ti = vt x vi"), "{train}");
    let meta = json(&p.join("model.json"));
    assert_eq!(meta["mask"], "none");
    assert_eq!(meta["loss"], "nle");
    ok(p, &["predict", "--z", "0.2"]);
    let fmeta = json(&p.join("forecast.json"));
    assert_eq!(fmeta["z"], 0.2);
    assert!((fmeta["lambda"].as_f64().unwrap() - 1.2815515655).abs() < 1e-6);
    ok(p, &["evaluate"]);
    let report = json(&p.join("metrics.json"));
    assert_eq!(report["z"], 0.2);
    assert!(report["rmse_avg"].as_f64().unwrap().is_finite());
    for f in [
        "train.config",
        "predict.config",
        "evaluate.config",
        "model.log.csv",
        "metrics.csv",
    ] {
        assert!(p.join(f).exists(), "{f} missing");
    }
}

#[test]
fn mask_is_recorded_and_reapplied() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["train", "--mask", "nwp"]);
    assert_eq!(json(&p.join("model.json"))["mask"], "nwp");
    ok(p, &["predict"]);
    assert_eq!(json(&p.join("forecast.json"))["mask"], "nwp");
    let both = duq(p, &["train", "--set", "mask_nwp=true", "--set", "mask_obs=true"]);
    assert_eq!(both.status.code(), Some(1));
}

#[test]
fn ensemble_of_three_members() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["train", "--ensemble", "3"]);
    let members: Vec<String> = (0..3)
        .map(|m| p.join(format!("model-{m}.bin")).display().to_string())
        .collect();
    let seeds: Vec<u64> = (0..3)
        .map(|m| json(&p.join(format!("model-{m}.json")))["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, [0, 1, 2]);
    let mut args = vec!["predict", "--variance", "mixture", "--members"];
    args.extend(members.iter().map(String::as_str));
    let stdout = ok(p, &args);
    assert!(stdout.contains("3 member(s)"), "{stdout}");
    assert_eq!(json(&p.join("forecast.json"))["variance_mode"], "mixture");
}

#[test]
fn nwp_against_itself_has_zero_skill() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["evaluate", "--nwp", "--name", "nwp"]);
    let r = json(&p.join("nwp.json"));
    assert!(r["ss_avg"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn oracle_intervals_cover_near_nominal() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let big = ["--set", "dates=400", "--set", "block_rate=0", "--set", "local_rate=0"];
    ok(p, &[&["synth"][..], &big].concat());
    ok(p, &[&["preprocess"][..], &big].concat());
    ok(p, &[&["evaluate", "--oracle", "--name", "oracle"][..], &big].concat());
    let r = json(&p.join("oracle.json"));
    let cells = 60.0 * 3.0 * 6.0;
    for picp in r["picp_obj_avg"].as_array().unwrap() {
        let picp = picp.as_f64().unwrap();
        assert!((picp - 0.9).abs() < 4.0 * (0.09f64 / cells).sqrt(), "picp {picp}");
    }
}

#[test]
fn ttest_compares_two_reports() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["evaluate", "--nwp", "--name", "nwp"]);
    ok(p, &["evaluate", "--oracle", "--name", "oracle"]);
    let (a, b) = (p.join("oracle.json"), p.join("nwp.json"));
    ok(p, &["evaluate", "--ttest", a.to_str().unwrap(), b.to_str().unwrap()]);
    let t = json(&p.join("ttest.json"));
    let rmse_p = t["rmse_day"]["p"].as_f64().unwrap();
    let ss_p = t["ss_day"]["p"].as_f64().unwrap();
    assert!(rmse_p < 0.05 && ss_p < 0.05, "{t}");
}
