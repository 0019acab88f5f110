use std::path::Path;
use std::sync::Arc;

use super::*;
use crate::capture::model::Source;
use crate::documents::Metrics;
use crate::package::Protection;
use crate::session::config::{DeviceChoice, DeviceKind, EnrichmentSettings, RecordingMethod};
use crate::session::{Environment, Session};

fn run(static_on: bool, dynamic_on: bool) -> (tempfile::TempDir, Arc<Store>, String) {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo");
    let app = store.put_app("app.apk", &std::fs::read(demo.join("app.apk")).unwrap()).unwrap();
    let cfg = AnalysisConfig {
        schema_version: "1.0".into(),
        analysis_id: None,
        title: "Demo shop".into(),
        annotations: "<b>note</b>".into(),
        app_ref: app.id,
        static_enabled: static_on,
        dynamic_enabled: dynamic_on,
        device: DeviceChoice {
            kind: DeviceKind::Replay,
            fixture: Some(demo),
            serial: None,
        },
        recording_method_key: dynamic_on.then_some(RecordingMethod::OndeviceKeylog),
        decoder_limits: None,
        enrichment: EnrichmentSettings {
            offline: true,
            provider: None,
        },
    };
    let mut s = Session::create(Environment::new(store.clone()), cfg).unwrap();
    s.run_headless().unwrap();
    let id = s.id().to_string();
    (dir, store, id)
}

#[test]
fn summary_matches_sections() {
    let (_d, store, id) = run(true, true);
    let m = build_report(&store, &id).unwrap();
    let rows = m.requests.items().unwrap();
    let entities = m.entities.items().unwrap();
    let groups = m.sensitive.items().unwrap();
    let s = m.summary;
    assert_eq!(s.total_requests, Some(rows.len()));
    assert_eq!(s.total_requests, Some(entities.iter().map(|e| e.request_count).sum()));
    assert_eq!(s.total_entities, Some(entities.len()));
    assert_eq!(
        s.sensitive_finding_count,
        Some(groups.iter().map(|g| g.sent.len() + g.received.len()).sum())
    );
    assert_eq!(
        s.undecrypted_flow_count,
        Some(
            rows.iter()
                .filter(|r| r.source == Source::PcapUndecryptedMeta && !r.tls.as_ref().unwrap().decrypted)
                .count()
        )
    );
    assert_eq!(s.permissions_count, Some(m.permissions.items().unwrap().len()));
    assert_eq!(s.trackers_count, Some(m.trackers.items().unwrap().len()));
    let domains: std::collections::BTreeSet<&str> = entities.iter().map(|e| e.domain.as_str()).collect();
    assert_eq!(s.total_domains, Some(domains.len()));

    // Every finding resolves to a request row, and per-row counts agree.
    for g in groups {
        for f in g.sent.iter().chain(&g.received) {
            assert!(rows.iter().any(|r| r.id == f.transaction_id));
        }
    }
    let total: usize = rows.iter().map(|r| r.finding_count).sum();
    assert_eq!(Some(total), s.sensitive_finding_count);
}

#[test]
fn video_offsets_fall_inside_the_recording() {
    let (_d, store, id) = run(false, true);
    let m = build_report(&store, &id).unwrap();
    let v = m.video.as_ref().unwrap();
    let limit = v.duration_ms.unwrap() as i64 + 2000;
    for r in m.requests.items().unwrap() {
        let off = r.video_offset_ms.unwrap();
        assert_eq!(off, r.started_at - v.start_offset_ms);
        assert!((0..=limit).contains(&off), "{} at {off}", r.id);
    }
}

#[test]
fn static_only_sections_absent_and_rendered_as_not_analyzed() {
    let (_d, store, id) = run(true, false);
    let m = build_report(&store, &id).unwrap();
    assert!(matches!(m.requests, Section::Absent { .. }));
    assert_eq!(m.summary.total_requests, None);
    let html = render_html(&m);
    assert_eq!(html.matches("not analyzed (dynamic analysis disabled)").count(), 3);
    assert!(html.contains("&lt;b&gt;note&lt;/b&gt;"));
}

#[test]
fn missing_entities_artifact_is_named() {
    let (_d, store, id) = run(false, true);
    let path = store.analysis_dir(&id).join("index.json");
    let mut index: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    index["artifacts"]
        .as_array_mut()
        .unwrap()
        .retain(|a| a["kind"] != "entities");
    std::fs::write(&path, serde_json::to_vec(&index).unwrap()).unwrap();
    match build_report(&store, &id) {
        Err(ReportError::MissingArtifact(ArtifactKind::Entities)) => {}
        other => panic!("{other:?}"),
    }
}

fn perm(name: &str) -> PermissionRecord {
    PermissionRecord {
        name: name.into(),
        protection: Protection::Dangerous,
        label: String::new(),
        description: "d".into(),
        is_privacy_sensitive: true,
        unknown: false,
    }
}

#[test]
fn render_is_deterministic_and_self_contained() {
    let (_d, store, id) = run(true, true);
    let mut m = build_report(&store, &id).unwrap();
    m.permissions = Section::Present {
        items: vec![perm("a.A"), perm("b.B"), perm("c.C")],
    };
    let html = render_html(&m);
    assert_eq!(html, render_html(&m.clone()));
    let table = html.split("<table class=\"permissions\">").nth(1).unwrap();
    let body = table.split("</table>").next().unwrap();
    assert_eq!(body.matches("<tr>").count(), 1 + 3);
    for needle in ["src=", "href=", "@import", "url(", "<script", "<link"] {
        assert!(!html.contains(needle), "{needle}");
    }
}

#[test]
fn report_model_validates() {
    let (_d, store, id) = run(true, true);
    let m: ReportModel = store.get_json(&id, ArtifactKind::ReportModel).unwrap();
    assert_eq!(m, build_report(&store, &id).unwrap());
    let empty = Metrics::default();
    assert_ne!(m.summary, empty);
}
