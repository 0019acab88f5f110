mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::{demo_dir, fixtures};

fn privlens(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privlens"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = privlens(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn apk_and_har_produce_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let har = fixtures().join("har/mitmproxy.har");
    let profile = demo_dir().join("profile.json");
    let res = privlens(&[&"analyze", &"--apk", &demo_dir().join("app.apk"), &"--har", &har, &"--profile", &profile, &"--offline", &"--out", &out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let model = json(&out.join("report_model.json"));
    let entries = json(&har)["log"]["entries"].as_array().unwrap().len();
    assert_eq!(model["summary"]["total_requests"], entries);
    assert!(model["summary"]["sensitive_finding_count"].as_u64().unwrap() > 0);
    assert!(out.join("report.html").exists());

    // rebuilding the report from the stored artifacts gives the same model
    std::fs::remove_file(out.join("report.html")).unwrap();
    let res = privlens(&[&"report", &out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("report.html").exists());
    assert_eq!(json(&out.join("report_model.json")), model);
}

#[test]
fn pcap_without_keylog_counts_undecrypted_flows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let pcap = demo_dir().join("capture.pcap");
    let res = privlens(&[&"analyze", &"--apk", &demo_dir().join("app.apk"), &"--pcap", &pcap, &"--offline", &"--out", &out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = &json(&out.join("report_model.json"))["summary"];
    assert!(summary["undecrypted_flow_count"].as_u64().unwrap() > 0);
    assert_eq!(summary["sensitive_finding_count"], 0);
}

#[test]
fn static_only_when_no_traffic_is_given() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = privlens(&[&"analyze", &"--apk", &fixtures().join("apk/trackers.apk"), &"--offline", &"--out", &out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = &json(&out.join("report_model.json"))["summary"];
    // no dynamic phase, so traffic counts are absent rather than zero
    assert!(summary["total_requests"].is_null());
    assert!(summary["trackers_count"].as_u64().unwrap() >= 2);
}

#[test]
fn bad_package_exits_with_a_coded_error() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.apk");
    std::fs::write(&junk, b"not a zip").unwrap();
    let res = privlens(&[&"analyze", &"--apk", &junk, &"--out", &tmp.path().join("run")]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn decode_prints_leaves_with_chains() {
    use base64::Engine;
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("payload.txt");
    let inner = base64::engine::general_purpose::STANDARD.encode(r#"{"adid":"abc","n":1}"#);
    std::fs::write(&file, inner).unwrap();
    let res = privlens(&[&"decode", &file]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let doc: Value = serde_json::from_slice(&res.stdout).unwrap();
    let leaves = doc["leaves"].as_array().unwrap();
    let adid = leaves.iter().find(|l| l["value"] == "abc").expect("adid leaf");
    assert_eq!(adid["chain"], serde_json::json!(["base64", "json"]));
    assert_eq!(doc["output_limit_exceeded"], false);
}
