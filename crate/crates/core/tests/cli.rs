use std::path::Path;
use std::process::{Command, Output};

use residcert::edit::{Corpus, MarkerSet, Vocabulary};
use residcert::pipeline::tree_digest;
use residcert::verify::VerifyReport;

fn residcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_residcert")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

#[test]
fn staged_commands_build_a_verifiable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let r = path(&root);
    ok(&residcert(&["extract", "--seed", "3", "--flavor", "llama", "--out", r]));
    ok(&residcert(&["certify-block", "--out", r, "--layers", "0-3"]));
    ok(&residcert(&["certify-model", "--out", r]));

    for layer in 0..4 {
        let cert = root.join(format!("blocks/{layer}/certificate.json"));
        let stdout = ok(&residcert(&["--format", "json", "verify", "block", path(&cert), "--artifacts", r]));
        let report: VerifyReport = serde_json::from_str(&stdout).unwrap();
        assert!(report.passed);
    }
    let model_cert = root.join("model_certificate.json");
    let text = ok(&residcert(&["verify", "model", path(&model_cert), "--artifacts", r]));
    assert!(text.contains("PASS"), "{text}");

    let corpus = dir.path().join("corpus.json");
    let markers = dir.path().join("markers.json");
    Corpus::toy(&Vocabulary::toy(96), 3, 1).unwrap().write(&corpus).unwrap();
    MarkerSet::examples().write(&markers).unwrap();
    ok(&residcert(&[
        "edit",
        "--patch",
        "block=2,mlp,alpha=0.5",
        "--artifacts",
        r,
        "--corpus",
        path(&corpus),
        "--markers",
        path(&markers),
        "--max-new",
        "4",
    ]));
    let edit_cert = root.join("edits/alpha_0.5/certificate.json");
    ok(&residcert(&["verify", "edit", path(&edit_cert), "--artifacts", r]));

    let stdout = ok(&residcert(&["--format", "json", "stitch", "--blocks", r]));
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["stitched_layers"], serde_json::json!([0, 1, 2, 3]));
    assert!(summary["delta_ppl"].as_f64().unwrap().abs() <= 1e-4);
}

#[test]
fn demo_is_reproducible_and_verify_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&residcert(&["demo", "--seed", "5", "--out", path(&a)]));
    ok(&residcert(&["demo", "--seed", "5", "--out", path(&b)]));
    assert_eq!(tree_digest(&a).unwrap(), tree_digest(&b).unwrap());

    let c = dir.path().join("c");
    ok(&residcert(&["demo", "--seed", "6", "--out", path(&c)]));
    assert_ne!(tree_digest(&a).unwrap(), tree_digest(&c).unwrap());

    // Verifying a's certificate against c's artifacts must fail.
    let cert = a.join("blocks/0/certificate.json");
    let out = residcert(&["verify", "block", path(&cert), "--artifacts", path(&c)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bound_command() {
    let dir = tempfile::tempdir().unwrap();
    let eps = dir.path().join("eps.json");
    let lip = dir.path().join("lip.json");
    std::fs::write(&eps, "[0.1, 0.2]").unwrap();
    std::fs::write(&lip, "[2.0, 3.0]").unwrap();
    let stdout = ok(&residcert(&["--format", "json", "bound", "--epsilons", path(&eps), "--lipschitz", path(&lip)]));
    let doc: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    // 0.1·3 + 0.2
    assert!((doc["bound"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!((doc["sum_epsilons"].as_f64().unwrap() - 0.3).abs() < 1e-15);

    std::fs::write(&lip, "[2.0]").unwrap();
    let out = residcert(&["bound", "--epsilons", path(&eps), "--lipschitz", path(&lip)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out)["error"]["message"].is_string());
}

#[test]
fn usage_and_io_errors() {
    let out = residcert(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = residcert(&["verify", "block"]);
    assert_eq!(out.status.code(), Some(2));
    let out = residcert(&["edit", "--patch", "block=1,attn,alpha=0.5", "--artifacts", "."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(ok(&residcert(&["--help"])).contains("verify"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = residcert(&["verify", "model", path(&missing), "--artifacts", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = residcert(&["certify-model", "--out", path(&dir.path().join("empty"))]);
    assert_eq!(out.status.code(), Some(1));
    let record = error_record(&out);
    assert!(record["error"]["kind"].is_string());
    assert!(record["error"]["code"].is_number());
}
