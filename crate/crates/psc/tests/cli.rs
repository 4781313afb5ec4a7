use std::path::PathBuf;
use std::process::Command;

use psc::cli::run;
use psc::{parse_model, serialize_model};
use psc_core::fixtures::GraphBuilder;
use psc_core::graph::{rewrite, RewriteOptions};
use psc_core::ConvSpec;
use serde_json::Value;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

fn psc(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("psc").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(psc(&["frobnicate"]).0, 2);
    assert_eq!(psc(&["verify", "--suite", "eq9"]).0, 2);
    assert_eq!(psc(&["count-params", "--model", &fixture("unet.json"), "--bogus"]).0, 2);
    assert_eq!(psc(&["count-params", "--model", "/nonexistent/model.json"]).0, 2);
    assert_eq!(psc(&["rewrite", "--model", &fixture("unet.json"), "--m", "4", "--n", "1"]).0, 2);
    assert_eq!(psc(&["--help"]).0, 0);
}

#[test]
fn malformed_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\"version\": 1, \"nodes\": [").unwrap();
    assert_eq!(psc(&["count-params", "--model", p.to_str().unwrap()]).0, 2);
}

#[test]
fn count_params_reports_total() {
    let (code, out) = psc(&["count-params", "--model", &fixture("unet.json")]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["total"], 23_339_651);
    let (code, table) = psc(&["count-params", "--model", &fixture("resnet34_3d.json"), "--format", "table"]);
    assert_eq!(code, 0);
    assert!(table.lines().last().unwrap().trim_end().ends_with("63519205"));
}

#[test]
fn rewrite_writes_graph_and_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("unet_psc.json");
    let (code, out) =
        psc(&["rewrite", "--model", &fixture("unet.json"), "--m", "1", "--n", "2", "--out", dest.to_str().unwrap()]);
    assert_eq!(code, 0);
    let report = json(&out);
    assert_eq!(report["total_before"], 23_339_651);
    assert_eq!(report["groups_skipped"], 0);
    let (before, after) = (23_339_651.0, report["total_after"].as_f64().unwrap());
    assert!((report["reduction_pct"].as_f64().unwrap() - 100.0 * (1.0 - after / before)).abs() < 1e-9);
    let g = parse_model(&std::fs::read_to_string(&dest).unwrap()).unwrap();
    assert!(g.nodes().iter().any(|n| n.op.kind() == "psc_block"));
    let (code, out) = psc(&["count-params", "--model", dest.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["total"], report["total_after"]);
}

#[test]
fn rewrite_without_out_prints_both() {
    let (code, out) =
        psc(&["rewrite", "--model", &fixture("unet_reduced.json"), "--m", "3", "--n", "1", "--max-len", "1"]);
    assert_eq!(code, 0);
    let v = json(&out);
    assert!(v["report"]["groups_replaced"].as_u64().unwrap() > 0);
    assert!(psc::model_json::model_from_value(&v["graph"]).is_ok());
}

#[test]
fn verify_suites() {
    let (code, out) = psc(&["verify", "--suite", "eq1", "--seeds", "20"]);
    assert_eq!(code, 0);
    let v = json(&out);
    assert_eq!(v["cases"].as_array().unwrap().len(), 20);
    assert!(v["max_residual"].as_f64().unwrap() < 1e-10);
    let (code, out) = psc(&["verify", "--suite", "eq5", "--seeds", "5"]);
    assert_eq!(code, 0);
    assert!(out.contains("110656"));
}

#[test]
fn grad_check_default_and_model() {
    assert_eq!(psc(&["grad-check", "--seeds", "2"]).0, 0);
    let mut b = GraphBuilder::new();
    let x = b.input(2);
    let h = b.conv_same("c1", &x, 3, 2, 3);
    let h = b.relu(&h);
    let h = b.conv_same("c2", &h, 3, 3, 3);
    let h = b.maxpool("pool", &h, 2);
    let y = b.conv("head", &h, ConvSpec::new([1, 1, 1], 3, 2).with_bias(true));
    let g = rewrite(&b.finish(&y), 2, 1, RewriteOptions::default()).unwrap().graph;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("small.json");
    std::fs::write(&p, serialize_model(&g)).unwrap();
    let (code, out) = psc(&["grad-check", "--model", p.to_str().unwrap(), "--d", "4"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(json(&out)["cases"].as_array().unwrap().len(), 2);
}

#[test]
fn decompose_random_kernel_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) =
        psc(&["decompose", "--d", "4", "--seed", "7", "--ranks", "2,2,2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let v = json(&out);
    assert!(v["max_error"].as_f64().unwrap() < 1e-10);
    assert!(v["filters"][0]["truncation"]["frobenius_error"].as_f64().unwrap() > 0.0);
    let core = psc::read_tensor(&dir.path().join("f0_core")).unwrap();
    assert_eq!(core.shape(), &[4, 4, 4, 1]);
    let (code, again) = psc(&["decompose", "--kernel", dir.path().join("f0_core").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(json(&again)["max_error"].as_f64().unwrap() < 1e-10);
    assert_eq!(psc(&["decompose", "--ranks", "2,2"]).0, 2);
}

#[test]
fn seed_determines_output() {
    let a = psc(&["decompose", "--d", "3", "--seed", "11"]);
    let b = psc(&["decompose", "--d", "3", "--seed", "11"]);
    assert_eq!(a, b);
}

#[test]
fn short_training_fails_the_descent_check() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = psc(&["train-demo", "--epochs", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 1);
    let v = json(&out);
    assert_eq!(v["runs"].as_array().unwrap().len(), 8);
    let csv = std::fs::read_to_string(dir.path().join("separable_P2SC2.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_loss,wall_time_ms");
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("curves.json").exists());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_psc");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["verify", "--suite", "eq4", "--seeds", "3"]), Some(0));
    assert_eq!(status(&["nope"]), Some(2));
    assert_eq!(status(&["train-demo", "--epochs", "1"]), Some(1));
}
