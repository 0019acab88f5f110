use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use privlens::*;

fn demo() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/demo")
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    pl_string_free(p);
    s
}

unsafe fn last_error() -> String {
    CStr::from_ptr(pl_last_error()).to_string_lossy().into_owned()
}

#[test]
fn store_app_analysis_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(pl_store_open(root.as_ptr(), &mut h), PlStatus::Ok);
        assert!(pl_last_error().is_null());

        let apk = std::fs::read(demo().join("app.apk")).unwrap();
        let name = CString::new("app.apk").unwrap();
        let mut id = ptr::null_mut();
        assert_eq!(pl_store_put_app(h, name.as_ptr(), apk.as_ptr(), apk.len(), &mut id), PlStatus::Ok);
        let app_id = take(id);

        let config = serde_json::json!({
            "schema_version": "1.0",
            "title": "ffi",
            "app_ref": app_id,
            "static_enabled": true,
            "dynamic_enabled": true,
            "device": {"kind": "replay", "fixture": demo()},
            "recording_method_key": "ondevice_keylog",
            "enrichment": {"offline": true},
        });
        let config = CString::new(config.to_string()).unwrap();
        let mut aid = ptr::null_mut();
        assert_eq!(pl_analysis_run(h, config.as_ptr(), &mut aid), PlStatus::Ok, "{}", last_error());
        let analysis = CString::new(take(aid)).unwrap();

        let mut json = ptr::null_mut();
        assert_eq!(pl_analysis_report_json(h, analysis.as_ptr(), &mut json), PlStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(report["summary"]["total_requests"], 7);

        let nope = CString::new("an-0000000000000000").unwrap();
        let mut json = ptr::null_mut();
        assert_eq!(pl_analysis_report_json(h, nope.as_ptr(), &mut json), PlStatus::UnknownAnalysis);
        assert!(json.is_null());
        assert!(last_error().starts_with("UnknownAnalysis"));
        pl_store_free(h);
    }
}

#[test]
fn bad_arguments_are_reported_not_crashed() {
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(pl_store_open(ptr::null(), &mut h), PlStatus::InvalidArgument);
        assert!(h.is_null());
        assert!(last_error().contains("root"));

        let mut out = ptr::null_mut();
        let cfg = CString::new("{}").unwrap();
        assert_eq!(pl_analysis_run(ptr::null(), cfg.as_ptr(), &mut out), PlStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let root = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(pl_store_open(root.as_ptr(), &mut h), PlStatus::Ok);
        assert_eq!(pl_analysis_run(h, cfg.as_ptr(), &mut out), PlStatus::InvalidConfig);
        let junk = b"not a package";
        let name = CString::new("x.apk").unwrap();
        assert_eq!(
            pl_store_put_app(h, name.as_ptr(), junk.as_ptr(), junk.len(), &mut out),
            PlStatus::PackageRejected,
            "{}",
            last_error()
        );
        pl_store_free(h);
        pl_string_free(ptr::null_mut());
    }
}

#[test]
fn decode_returns_layer_tree() {
    let payload = b"eyJpbWVpIjoiMzU2OTM4MDM1NjQzODA5In0=";
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(pl_decode(payload.as_ptr(), payload.len(), &mut out), PlStatus::Ok);
        let doc = take(out);
        assert!(doc.contains("356938035643809"), "{doc}");
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/privlens.h")).unwrap();
    for f in [
        "pl_last_error",
        "pl_string_free",
        "pl_store_open",
        "pl_store_free",
        "pl_store_put_app",
        "pl_analysis_run",
        "pl_analysis_report_json",
        "pl_decode",
        "typedef struct PlStore PlStore",
        "PL_STATUS_PANIC = 10",
    ] {
        assert!(header.contains(f), "{f}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH, skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"privlens.h\"\nint main(void) { PlStore *h = 0; return pl_store_open(\".\", &h) == PL_STATUS_OK; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "clang", "gcc"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
