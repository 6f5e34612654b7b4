use std::path::Path;
use std::process::{Command, Output};

use cpd_crib::analysis::achieved_correlations;
use cpd_crib::io::{read_kruskal, tensor_to_json};
use cpd_crib::tensor::full_tensor;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpd-crib")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const UNIT_RANK1: &str = r#"{"dims":[3,2,2],"rank":1,"factors":[[[1],[0],[0]],[[1],[0]],[[0],[1]]]}"#;
const ORTHO: &str = r#"{"dims":[3,2,2],"rank":2,"factors":[[[1,0],[0,1],[0,0]],[[1,0],[0,1]],[[1,0.5],[0,1]]]}"#;

#[test]
fn crib_of_unit_rank_one_model() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", UNIT_RANK1);
    let v = json(&run(&["crib", "--factors", &f, "--sigma2", "1.0", "--target", "1:1"]));
    assert_eq!(v["crib"], 2.0);
    assert_eq!(v["finite"], true);
    assert!(v["timestamp"].is_string());
}

#[test]
fn all_columns_in_csv() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", ORTHO);
    let out = run(&["crib", "--factors", &f, "--all", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,column,crib,crib_db,angle_deg,finite,method");
    assert_eq!(lines.len(), 1 + 3 * 2);
}

#[test]
fn stable_rank_of_eight_way_binary_tensor() {
    let v = json(&run(&["stable-rank", "--dims", "2,2,2,2,2,2,2,2"]));
    assert_eq!(v["bound"], 28);
}

#[test]
fn stable_rank_verification() {
    let v = json(&run(&["stable-rank", "--dims", "3,3,3", "--verify", "--seeds", "4"]));
    assert_eq!(v["verify"][0]["rank"], 3);
    assert_eq!(v["verify"][0]["finite_count"], 4);
    assert_eq!(v["verify"][1]["rank"], 4);
    assert_eq!(v["verify"][1]["finite_count"], 0);
}

#[test]
fn reshape_loss_for_rank_two_correlations() {
    let v = json(&run(&["reshape-loss", "--i1", "5", "--c", "0,0.99,0.1,0.1", "--merge", "3,4"]));
    let loss = v["loss_db"].as_f64().unwrap();
    assert!((loss - 11.22).abs() < 0.01, "{loss}");
}

#[test]
fn reshape_loss_from_model_file() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("m.json");
    let out = run(&["gen", "--dims", "4,3,3,3", "--rank", "2", "--seed", "2", "-o", f.to_str().unwrap()]);
    assert!(out.status.success());
    let v = json(&run(&["reshape-loss", "--factors", f.to_str().unwrap(), "--merge", "3,4"]));
    assert!(v["loss_db"].as_f64().unwrap() >= -1e-9);
    let out = run(&["reshape-loss", "--factors", f.to_str().unwrap(), "--merge", "1,2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_round_trips_and_hits_correlations() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let out = run(&["gen", "--dims", "5,4,4,4", "--rank", "2", "--correlations", "0,0.99,0.1,0.1", "--seed", "9", "-o", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = read_kruskal(&a).unwrap();
    let got = achieved_correlations(&m);
    for (g, t) in got.iter().zip([0.0, 0.99, 0.1, 0.1]) {
        assert!((g[0] - t).abs() < 1e-12, "{got:?}");
    }
    let b = dir.path().join("b.json");
    run(&["gen", "--dims", "3,3,3", "--rank", "1", "--seed", "1", "-o", b.to_str().unwrap()]);
    let m = read_kruskal(&b).unwrap();
    assert_eq!(m.dims(), vec![3, 3, 3]);
    assert_eq!(std::fs::read_to_string(&b).unwrap().trim_end(), cpd_crib::io::kruskal_to_json(&m));
}

#[test]
fn gen_rejects_infeasible_correlation() {
    let out = run(&["gen", "--dims", "3,3,3", "--rank", "2", "--correlations", "0,1.5,0.2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("infeasible"));
}

#[test]
fn malformed_json_reports_line() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "bad.json", "{\n  \"dims\": [2, 2, 2],\n  \"rank\": 1,\n  \"factors\": [[[1], [2]] x\n}");
    let out = run(&["crib", "--factors", &f]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn bad_field_is_named() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "bad.json", r#"{"dims":[3,2,2],"rank":1,"factors":[[[1],[0],[0]],[[1],[0,1]],[[0],[1]]]}"#);
    let out = run(&["crib", "--factors", &f]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("factors[1][1]"), "{}", stderr(&out));
}

#[test]
fn mask_dimension_mismatch_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", UNIT_RANK1);
    let w = write(&dir, "w.json", r#"{"dims":[2,2,2],"values":[1,1,1,1,1,1,1,1]}"#);
    let out = run(&["crib", "--factors", &f, "--mask", &w]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["crib", "--factors", &f, "--target", "4:1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["crib"]).status.code(), Some(1));
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
    assert_eq!(run(&["closed-form", "--case", "rank1", "--params", "{\"i1\": 3, \"x\": 1}"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn infinite_crib_is_an_answer() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("over.json");
    run(&["gen", "--dims", "2,2,2", "--rank", "3", "-o", f.to_str().unwrap()]);
    let v = json(&run(&["crib", "--factors", f.to_str().unwrap()]));
    assert_eq!(v["finite"], false);
    assert!(v["crib"].is_null());
}

#[test]
fn numerical_failure_exits_two() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", ORTHO);
    let out = run(&["crib", "--factors", &f, "--method", "general"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn closed_forms() {
    let v = json(&run(&["closed-form", "--case", "rank1", "--params", r#"{"i1": 3}"#]));
    assert_eq!(v["crib"], 2.0);
    let v = json(&run(&["closed-form", "--case", "ortho", "--params", r#"{"i1": 4, "gammas": [0.5]}"#]));
    assert!((v["crib"].as_f64().unwrap() - 10.0 / 3.0).abs() < 1e-12);
    let v = json(&run(&["closed-form", "--case", "brie", "--params", r#"{"i1": 4, "c2": 0, "c3": 0, "c4": 0}"#]));
    assert!((v["crib"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    let v = json(&run(&["closed-form", "--case", "rank2", "--params", r#"{"i1": 5, "c": [0.2, 0.5, 0.5]}"#]));
    assert_eq!(v["finite"], true);
    let v = json(&run(&["closed-form", "--case", "ortho", "--params", r#"{"i1": 4, "gammas": [1.0]}"#]));
    assert_eq!(v["finite"], false);
}

#[test]
fn reproducible_reports_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", ORTHO);
    let args = ["mc", "--factors", &f, "--snr-db", "40", "--trials", "20", "--seed", "3", "--reproducible"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(!String::from_utf8_lossy(&a.stdout).contains("timestamp"));
}

#[test]
fn thread_cap_from_environment() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", ORTHO);
    let args = ["crib", "--factors", &f, "--all", "--reproducible"];
    let capped = Command::new(env!("CARGO_BIN_EXE_cpd-crib")).env("CPD_CRIB_THREADS", "1").args(args).output().unwrap();
    assert_eq!(capped.stdout, run(&args).stdout);
    let bad = Command::new(env!("CARGO_BIN_EXE_cpd-crib")).env("CPD_CRIB_THREADS", "zero").args(args).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn dump_hessian_writes_square_matrix() {
    let dir = TempDir::new().unwrap();
    let f = write(&dir, "m.json", ORTHO);
    let h = dir.path().join("h.csv");
    let out = run(&["crib", "--factors", &f, "--dump-hessian", h.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&h).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2 * 7);
    assert!(rows.iter().all(|r| r.split(',').count() == 14));
}

fn write_tensor(dir: &TempDir, model_path: &Path) -> String {
    let m = read_kruskal(model_path).unwrap();
    write(dir, "t.json", &tensor_to_json(&full_tensor(&m)))
}

#[test]
fn decompose_recovers_noiseless_model() {
    let dir = TempDir::new().unwrap();
    let truth = dir.path().join("truth.json");
    run(&["gen", "--dims", "4,5,6", "--rank", "2", "--seed", "5", "-o", truth.to_str().unwrap()]);
    let t = write_tensor(&dir, &truth);
    let fitted = dir.path().join("fit.json");
    for algo in ["gn", "als"] {
        let v = json(&run(&[
            "decompose", "--tensor", &t, "--rank", "2", "--algo", algo, "--truth", truth.to_str().unwrap(),
            "--model-out", fitted.to_str().unwrap(), "--max-iters", "2000",
        ]));
        assert_eq!(v["converged"], true, "{algo}");
        for c in v["columns"].as_array().unwrap() {
            assert!(c["angular_error_deg"].as_f64().unwrap() < 1e-4, "{algo}: {c}");
        }
        assert_eq!(read_kruskal(&fitted).unwrap().rank(), 2);
    }
}

#[test]
fn mc_sweeps_missing_fractions() {
    let dir = TempDir::new().unwrap();
    let f = dir.path().join("m.json");
    run(&["gen", "--dims", "4,4,4", "--rank", "2", "--correlations", "0.3,0.3,0.3", "--seed", "1", "-o", f.to_str().unwrap()]);
    let v = json(&run(&["mc", "--factors", f.to_str().unwrap(), "--snr-db", "40", "--trials", "50", "--missing", "0,0.2"]));
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for run in runs {
        for c in run["columns"].as_array().unwrap() {
            let gap = c["msae_db"].as_f64().unwrap() - c["crib_db"].as_f64().unwrap();
            assert!(gap.abs() < 2.0, "{c}");
        }
    }
}
