//! Report assembly from stored artifacts and static HTML rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::capture::har::import_har;
use crate::capture::model::{HttpTransaction, Source, TlsInfo};
use crate::documents::{EntitiesDoc, FindingsDoc, FlowMetaDoc, ManifestModelDoc, Metrics, PermissionsDoc, SummaryDoc, TrackersDoc};
use crate::enrich::whois::IpMeta;
use crate::enrich::EndpointEntity;
use crate::package::{PermissionRecord, TrackerRecord};
use crate::schema::{self, SchemaKind};
use crate::sensitive::SensitiveFinding;
use crate::session::config::AnalysisConfig;
use crate::session::device::DeviceInfo;
use crate::store::{ArtifactKind, Store, StoreError, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Section<T> {
    Present { items: Vec<T> },
    Absent { reason: String },
}

impl<T> Section<T> {
    pub fn items(&self) -> Option<&[T]> {
        match self {
            Section::Present { items } => Some(items),
            Section::Absent { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub id: String,
    pub started_at: i64,
    pub duration_ms: f64,
    pub method: String,
    pub url: String,
    pub host: String,
    pub status: u16,
    pub http_version: String,
    pub source: Source,
    pub tls: Option<TlsInfo>,
    pub server_ip: Option<String>,
    pub request_bytes: usize,
    pub response_bytes: usize,
    pub entity_host: String,
    pub company: Option<String>,
    pub blocklisted: bool,
    pub finding_count: usize,
    /// Position of the request in the screen recording.
    pub video_offset_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingGroup {
    pub label: String,
    pub sent: Vec<SensitiveFinding>,
    pub received: Vec<SensitiveFinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct About {
    pub title: String,
    pub annotations: String,
    pub config: AnalysisConfig,
    pub app: Option<ManifestModelDoc>,
    pub device: Option<DeviceInfo>,
    pub base_time_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub artifact: ArtifactKind,
    pub media_type: String,
    pub start_offset_ms: i64,
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportModel {
    pub schema_version: String,
    pub analysis_id: String,
    pub about: About,
    pub summary: Metrics,
    pub permissions: Section<PermissionRecord>,
    pub trackers: Section<TrackerRecord>,
    pub requests: Section<RequestRow>,
    pub entities: Section<EndpointEntity>,
    pub sensitive: Section<FindingGroup>,
    pub video: Option<VideoRef>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("missing artifact {0}")]
    MissingArtifact(ArtifactKind),
    #[error("inconsistent report: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            ReportError::MissingArtifact(_) => "MissingArtifact",
            ReportError::Inconsistent(_) => "InconsistentReport",
            ReportError::Store(e) => e.code(),
        }
    }
}

const STATIC_OFF: &str = "static analysis disabled";
const DYNAMIC_OFF: &str = "dynamic analysis disabled";

fn need<T: for<'de> Deserialize<'de>>(store: &Store, id: &str, kind: ArtifactKind) -> Result<T, ReportError> {
    if !store.has_artifact(id, kind) {
        return Err(ReportError::MissingArtifact(kind));
    }
    Ok(store.get_json(id, kind)?)
}

/// Assembles the report model for a finished analysis.
pub fn build_report(store: &Store, id: &str) -> Result<ReportModel, ReportError> {
    let mut config: AnalysisConfig = need(store, id, ArtifactKind::Config)?;
    config.analysis_id = None;
    let summary: SummaryDoc = need(store, id, ArtifactKind::Summary)?;
    let app: Option<ManifestModelDoc> = if store.has_artifact(id, ArtifactKind::ManifestModel) {
        Some(store.get_json(id, ArtifactKind::ManifestModel)?)
    } else {
        None
    };

    let (permissions, trackers) = if config.static_enabled {
        let p: PermissionsDoc = need(store, id, ArtifactKind::Permissions)?;
        let t: TrackersDoc = need(store, id, ArtifactKind::Trackers)?;
        (Section::Present { items: p.permissions }, Section::Present { items: t.trackers })
    } else {
        (absent(STATIC_OFF), absent(STATIC_OFF))
    };

    let video = summary.video.map(|v| VideoRef {
        artifact: ArtifactKind::Video,
        media_type: ArtifactKind::Video.media_type().to_string(),
        start_offset_ms: v.start_offset_ms,
        duration_ms: v.duration_ms,
    });

    let (requests, entities, sensitive) = if config.dynamic_enabled {
        if !store.has_artifact(id, ArtifactKind::Har) {
            return Err(ReportError::MissingArtifact(ArtifactKind::Har));
        }
        let flow_meta: FlowMetaDoc = need(store, id, ArtifactKind::FlowMeta)?;
        let findings: FindingsDoc = need(store, id, ArtifactKind::Findings)?;
        let entities: EntitiesDoc = need(store, id, ArtifactKind::Entities)?;
        let (har, _) = store.get_artifact(id, ArtifactKind::Har)?;
        let log = import_har(&String::from_utf8_lossy(&har))
            .map_err(|e| ReportError::Inconsistent(format!("stored HAR: {e}")))?;

        let mut txs = log.transactions;
        let meta_only = flow_meta.flow_meta.iter().filter(|m| !m.decrypted || m.protocol_note.is_some());
        for (n, m) in meta_only.enumerate() {
            let mut placeholder = HttpTransaction::undecrypted(format!("meta-{n}"), m);
            if let Some(tls) = placeholder.tls.as_mut() {
                tls.decrypted = m.decrypted;
            }
            txs.push(placeholder);
        }
        let rows = request_rows(&txs, &entities.entities, &findings.findings, video.as_ref());
        let known: std::collections::HashSet<&str> = rows.iter().map(|r| r.id.as_str()).collect();
        if let Some(f) = findings.findings.iter().find(|f| !known.contains(f.transaction_id.as_str())) {
            return Err(ReportError::Inconsistent(format!(
                "finding references unknown request {}",
                f.transaction_id
            )));
        }
        (
            Section::Present { items: rows },
            Section::Present { items: entities.entities },
            Section::Present {
                items: group_findings(findings.findings),
            },
        )
    } else {
        (absent(DYNAMIC_OFF), absent(DYNAMIC_OFF), absent(DYNAMIC_OFF))
    };

    Ok(ReportModel {
        schema_version: SCHEMA_VERSION.into(),
        analysis_id: id.to_string(),
        about: About {
            title: config.title.clone(),
            annotations: config.annotations.clone(),
            app,
            device: summary.device,
            base_time_ms: config.dynamic_enabled.then_some(summary.base_time_ms),
            config,
        },
        summary: summary.metrics,
        permissions,
        trackers,
        requests,
        entities,
        sensitive,
        video,
    })
}

fn absent<T>(reason: &str) -> Section<T> {
    Section::Absent { reason: reason.into() }
}

fn request_rows(
    txs: &[HttpTransaction],
    entities: &[EndpointEntity],
    findings: &[SensitiveFinding],
    video: Option<&VideoRef>,
) -> Vec<RequestRow> {
    let by_host: HashMap<&str, &EndpointEntity> = entities.iter().map(|e| (e.host.as_str(), e)).collect();
    let mut per_tx: HashMap<&str, usize> = HashMap::new();
    for f in findings {
        *per_tx.entry(f.transaction_id.as_str()).or_default() += 1;
    }
    let mut rows: Vec<RequestRow> = txs
        .iter()
        .map(|tx| {
            let host = tx.host().to_ascii_lowercase();
            let entity = by_host.get(host.as_str());
            RequestRow {
                id: tx.id.clone(),
                started_at: tx.started_at,
                duration_ms: tx.duration_ms,
                method: tx.method.clone(),
                url: tx.url.to_string(),
                host: tx.host().to_string(),
                status: tx.status,
                http_version: tx.http_version.clone(),
                source: tx.source,
                tls: tx.tls.clone(),
                server_ip: tx.server_ip.clone(),
                request_bytes: tx.request_body.bytes.len(),
                response_bytes: tx.response_body.bytes.len(),
                company: entity.and_then(|e| e.company.as_ref().map(|c| c.display_name.clone())),
                blocklisted: entity.is_some_and(|e| !e.blocklist_hits.is_empty()),
                entity_host: host,
                finding_count: per_tx.get(tx.id.as_str()).copied().unwrap_or(0),
                video_offset_ms: video.map(|v| tx.started_at - v.start_offset_ms),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.started_at.cmp(&b.started_at).then_with(|| a.id.cmp(&b.id)));
    rows
}

fn group_findings(findings: Vec<SensitiveFinding>) -> Vec<FindingGroup> {
    let mut groups: BTreeMap<String, FindingGroup> = BTreeMap::new();
    for f in findings {
        let g = groups.entry(f.label.clone()).or_insert_with(|| FindingGroup {
            label: f.label.clone(),
            sent: Vec::new(),
            received: Vec::new(),
        });
        if f.is_received() {
            g.received.push(f);
        } else {
            g.sent.push(f);
        }
    }
    groups.into_values().collect()
}

/// Builds, validates and stores the report model and its HTML rendering.
/// Existing report artifacts are replaced.
pub fn publish(store: &Store, id: &str) -> Result<ReportModel, ReportError> {
    let model = build_report(store, id)?;
    let value = serde_json::to_value(&model).expect("report serializes");
    schema::validate(SchemaKind::ReportModel, &value).map_err(|issues| {
        ReportError::Inconsistent(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))
    })?;
    store.replace_json(id, ArtifactKind::ReportModel, &model)?;
    store.replace_artifact(id, ArtifactKind::ReportHtml, render_html(&model).as_bytes())?;
    Ok(model)
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;font-size:10pt;margin:2em;color:#111}\
h1{font-size:16pt}h2{font-size:13pt;border-bottom:1px solid #999;margin-top:2em;page-break-after:avoid}\
table{border-collapse:collapse;width:100%;margin:.5em 0}th,td{border:1px solid #bbb;padding:2px 4px;text-align:left;vertical-align:top;word-break:break-all}\
th{background:#eee}.absent{font-style:italic;color:#666}.num{text-align:right}\
@media print{section{page-break-inside:auto}tr{page-break-inside:avoid}}";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn table(out: &mut String, class: &str, head: &[&str], rows: Vec<Vec<String>>) {
    let _ = write!(out, "<table class=\"{class}\"><thead><tr>");
    for h in head {
        let _ = write!(out, "<th>{}</th>", escape(h));
    }
    out.push_str("</tr></thead><tbody>\n");
    for r in rows {
        out.push_str("<tr>");
        for c in r {
            let _ = write!(out, "<td>{}</td>", escape(&c));
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</tbody></table>\n");
}

fn section<T>(out: &mut String, title: &str, sec: &Section<T>, body: impl FnOnce(&mut String, &[T])) {
    let _ = writeln!(out, "<section><h2>{}</h2>", escape(title));
    match sec {
        Section::Present { items } => body(out, items),
        Section::Absent { reason } => {
            let _ = writeln!(out, "<p class=\"absent\">not analyzed ({})</p>", escape(reason));
        }
    }
    out.push_str("</section>\n");
}

/// Renders a standalone, print-oriented HTML document. Output depends only
/// on the model.
pub fn render_html(m: &ReportModel) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\"><head><meta charset=\"utf-8\"><title>{}</title><style>{STYLE}</style></head><body>\n",
        escape(&m.about.title)
    );
    let _ = writeln!(out, "<h1>{}</h1>", escape(&m.about.title));

    out.push_str("<section><h2>About</h2>\n");
    let c = &m.about.config;
    let mut about = vec![
        vec!["Analysis".into(), m.analysis_id.clone()],
        vec!["Annotations".into(), m.about.annotations.clone()],
        vec!["Static analysis".into(), c.static_enabled.to_string()],
        vec!["Dynamic analysis".into(), c.dynamic_enabled.to_string()],
        vec!["Recording method".into(), opt(c.recording_method_key.map(|k| k.as_str()))],
        vec!["Enrichment offline".into(), c.enrichment.offline.to_string()],
    ];
    if let Some(app) = &m.about.app {
        about.push(vec!["Package".into(), app.manifest.package_name.clone()]);
        about.push(vec![
            "Version".into(),
            format!("{} ({})", app.manifest.version_name, app.manifest.version_code),
        ]);
        about.push(vec!["File".into(), format!("{} ({} bytes)", app.app.file_name, app.app.size)]);
        about.push(vec!["SHA-256".into(), app.app.sha256.clone()]);
        about.push(vec![
            "SDK min/target".into(),
            format!("{}/{}", opt(app.manifest.sdk_versions.min), opt(app.manifest.sdk_versions.target)),
        ]);
    }
    if let Some(d) = &m.about.device {
        about.push(vec!["Device".into(), format!("{} ({})", d.identity, d.kind.as_str())]);
    }
    if let Some(v) = &m.video {
        about.push(vec![
            "Screen recording".into(),
            format!("artifact {}, starts {} ms from capture start", v.artifact, v.start_offset_ms),
        ]);
    }
    table(&mut out, "about", &["Field", "Value"], about);
    out.push_str("</section>\n");

    out.push_str("<section><h2>Summary</h2>\n");
    let s = &m.summary;
    table(
        &mut out,
        "summary",
        &["Metric", "Value"],
        vec![
            vec!["Requests".into(), opt(s.total_requests)],
            vec!["Domains".into(), opt(s.total_domains)],
            vec!["Receiving entities".into(), opt(s.total_entities)],
            vec!["Companies".into(), opt(s.total_companies)],
            vec!["Sensitive findings".into(), opt(s.sensitive_finding_count)],
            vec!["Undecrypted flows".into(), opt(s.undecrypted_flow_count)],
            vec!["Permissions".into(), opt(s.permissions_count)],
            vec!["Tracking libraries".into(), opt(s.trackers_count)],
        ]
        .into_iter()
        .map(|mut r| {
            if r[1] == "-" {
                r[1] = "not analyzed".into();
            }
            r
        })
        .collect(),
    );
    out.push_str("</section>\n");

    section(&mut out, "Permissions", &m.permissions, |out, items| {
        table(
            out,
            "permissions",
            &["Permission", "Protection", "Description"],
            items
                .iter()
                .map(|p| {
                    let v = serde_json::to_value(p).unwrap_or_default();
                    vec![
                        field(&v, "name"),
                        field(&v, "protection"),
                        field(&v, "description"),
                    ]
                })
                .collect(),
        )
    });
    section(&mut out, "Tracking libraries", &m.trackers, |out, items| {
        table(
            out,
            "trackers",
            &["Tracker", "Matched signatures"],
            items
                .iter()
                .map(|t| {
                    let v = serde_json::to_value(t).unwrap_or_default();
                    vec![field(&v, "name"), field(&v, "matched_signatures")]
                })
                .collect(),
        )
    });
    section(&mut out, "Network requests", &m.requests, |out, items| {
        table(
            out,
            "requests",
            &["#", "Start (ms)", "Video (ms)", "Method", "URL", "Status", "Source", "Company", "Blocklisted", "Findings"],
            items
                .iter()
                .map(|r| {
                    vec![
                        r.id.clone(),
                        r.started_at.to_string(),
                        opt(r.video_offset_ms),
                        r.method.clone(),
                        r.url.clone(),
                        r.status.to_string(),
                        r.source.as_str().to_string(),
                        opt(r.company.as_deref()),
                        if r.blocklisted { "yes" } else { "no" }.to_string(),
                        r.finding_count.to_string(),
                    ]
                })
                .collect(),
        )
    });
    section(&mut out, "Receiving entities", &m.entities, |out, items| {
        table(
            out,
            "entities",
            &["Host", "Domain", "Company", "Hosting", "Blocklists", "Requests", "Decrypted", "Bytes sent"],
            items
                .iter()
                .map(|e| {
                    let hosting = match &e.hosting {
                        Some(IpMeta::Resolved(r)) => {
                            format!("{} ({})", opt(r.org.as_deref()), opt(r.country.as_deref()))
                        }
                        Some(IpMeta::Unresolved { cause }) => format!("unresolved: {cause}"),
                        None => "-".into(),
                    };
                    vec![
                        e.host.clone(),
                        e.domain.clone(),
                        opt(e.company.as_ref().map(|c| c.display_name.as_str())),
                        hosting,
                        e.blocklist_hits.iter().map(|h| h.list_name.as_str()).collect::<Vec<_>>().join(", "),
                        e.request_count.to_string(),
                        e.decrypted_requests.to_string(),
                        e.bytes_sent.to_string(),
                    ]
                })
                .collect(),
        )
    });
    section(&mut out, "Sensitive data", &m.sensitive, |out, items| {
        for g in items {
            let _ = writeln!(
                out,
                "<h3>{} ({} sent, {} received)</h3>",
                escape(&g.label),
                g.sent.len(),
                g.received.len()
            );
            table(
                out,
                "findings",
                &["Request", "Direction", "Location", "Path", "Encoding", "Detector", "Value"],
                g.sent
                    .iter()
                    .map(|f| ("sent", f))
                    .chain(g.received.iter().map(|f| ("received", f)))
                    .map(|(dir, f)| {
                        vec![
                            f.transaction_id.clone(),
                            dir.to_string(),
                            f.location.as_str().to_string(),
                            f.path.clone(),
                            crate::decoder::display_chain(&f.encoding_chain)
                                .iter()
                                .map(|e| e.as_str())
                                .collect::<Vec<_>>()
                                .join(" > "),
                            match &f.adapter_id {
                                Some(a) => format!("adapter {a}"),
                                None => "pattern".into(),
                            },
                            f.matched_text.clone(),
                        ]
                    })
                    .collect(),
            );
        }
    });
    out.push_str("</body></html>\n");
    out
}

fn field(v: &serde_json::Value, key: &str) -> String {
    match v.get(key) {
        None | Some(serde_json::Value::Null) => "-".into(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Array(a)) => a
            .iter()
            .map(|x| x.as_str().map_or_else(|| x.to_string(), str::to_string))
            .collect::<Vec<_>>()
            .join(", "),
        Some(other) => other.to_string(),
    }
}

#[cfg(test)]
mod tests;
