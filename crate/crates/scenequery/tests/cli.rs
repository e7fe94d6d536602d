use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const Q1: &str = "A car stays near a truck for 16 frames";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenequery"))
        .args(args)
        .env_remove("SCENEQUERY_LLM_ENDPOINT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_ingest_query_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let text = ok(&["synth", "--out", s(&data)]);
    assert!(text.contains(Q1), "{text}");
    for f in ["declaration.json", "fixtures.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let manifest = data.join("manifest.json");

    let ingest: Value = serde_json::from_str(&ok(&["--format", "json", "ingest", s(&manifest)])).unwrap();
    assert!(ingest["counts"]["frames"].as_u64().unwrap() > 0);
    assert!(ingest["domains"]["onames"].as_array().unwrap().iter().any(|o| o == "truck"));

    let result = dir.path().join("r.json");
    let fixtures = data.join("fixtures.json");
    let args = [
        "query",
        Q1,
        "--data",
        s(&manifest),
        "--fixtures",
        s(&fixtures),
        "--out",
        s(&result),
        "--format",
        "json",
    ];
    let printed: Value = serde_json::from_str(&ok(&args)).unwrap();
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(saved["dsl"], "Duration((car(o0), truck(o1), near(o0, o1)), 16)");

    let decl: Value = serde_json::from_str(&std::fs::read_to_string(data.join("declaration.json")).unwrap()).unwrap();
    let truth = decl["queries"].as_array().unwrap().iter().find(|q| q["text"] == Q1).unwrap();
    assert_eq!(saved["matched"], truth["positives"]);

    let report = ok(&["report", s(&result)]);
    assert!(report.starts_with(&format!("query: {Q1}")), "{report}");
    assert!(report.contains("udf:   near("), "{report}");
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&["ingest", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let out = run(&["report", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parsing"));

    ok(&["synth", "--out", s(dir.path())]);
    std::fs::remove_file(dir.path().join("declaration.json")).unwrap();
    let manifest = dir.path().join("manifest.json");
    let fixtures = dir.path().join("fixtures.json");
    let out = run(&["query", Q1, "--data", s(&manifest), "--fixtures", s(&fixtures)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("declaration.json"));

    let out = run(&["query", Q1, "--data", s(&manifest)]);
    assert!(!out.status.success(), "no endpoint configured should fail");
}
