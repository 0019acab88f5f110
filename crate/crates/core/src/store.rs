//! File-based result store.
//!
//! Layout under the root directory:
//!
//! ```text
//! apps/<app id>/package.bin      uploaded bytes
//! apps/<app id>/package.json     parsed AppPackage
//! analyses/<analysis id>/index.json
//! analyses/<analysis id>/<kind file>
//! ```
//!
//! A single-analysis store (`Store::open_single`) keeps the analysis files
//! directly in its root and the package under `app/`.
//!
//! Every write goes to a temporary file first and is renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::package::{parse_package, sha256_hex, AppPackage, PackageError, PackageFormat};
use crate::schema::{self, SchemaIssue, SchemaKind};
use crate::session::State;

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Config,
    ManifestModel,
    Permissions,
    Trackers,
    Har,
    Pcap,
    Keylog,
    FlowMeta,
    Findings,
    Entities,
    Summary,
    Video,
    ReportModel,
    ReportHtml,
    Log,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 15] = [
        ArtifactKind::Config,
        ArtifactKind::ManifestModel,
        ArtifactKind::Permissions,
        ArtifactKind::Trackers,
        ArtifactKind::Har,
        ArtifactKind::Pcap,
        ArtifactKind::Keylog,
        ArtifactKind::FlowMeta,
        ArtifactKind::Findings,
        ArtifactKind::Entities,
        ArtifactKind::Summary,
        ArtifactKind::Video,
        ArtifactKind::ReportModel,
        ArtifactKind::ReportHtml,
        ArtifactKind::Log,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Config => "config",
            ArtifactKind::ManifestModel => "manifest_model",
            ArtifactKind::Permissions => "permissions",
            ArtifactKind::Trackers => "trackers",
            ArtifactKind::Har => "har",
            ArtifactKind::Pcap => "pcap",
            ArtifactKind::Keylog => "keylog",
            ArtifactKind::FlowMeta => "flow_meta",
            ArtifactKind::Findings => "findings",
            ArtifactKind::Entities => "entities",
            ArtifactKind::Summary => "summary",
            ArtifactKind::Video => "video",
            ArtifactKind::ReportModel => "report_model",
            ArtifactKind::ReportHtml => "report_html",
            ArtifactKind::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ArtifactKind::Har => "traffic.har",
            ArtifactKind::Pcap => "capture.pcap",
            ArtifactKind::Keylog => "keylog.txt",
            ArtifactKind::Video => "screen.mp4",
            ArtifactKind::ReportHtml => "report.html",
            ArtifactKind::Config => "config.json",
            ArtifactKind::ManifestModel => "manifest_model.json",
            ArtifactKind::Permissions => "permissions.json",
            ArtifactKind::Trackers => "trackers.json",
            ArtifactKind::FlowMeta => "flow_meta.json",
            ArtifactKind::Findings => "findings.json",
            ArtifactKind::Entities => "entities.json",
            ArtifactKind::Summary => "summary.json",
            ArtifactKind::ReportModel => "report_model.json",
            ArtifactKind::Log => "log.json",
        }
    }

    pub fn media_type(self) -> &'static str {
        match self {
            ArtifactKind::Pcap => "application/vnd.tcpdump.pcap",
            ArtifactKind::Keylog => "text/plain; charset=utf-8",
            ArtifactKind::Video => "video/mp4",
            ArtifactKind::ReportHtml => "text/html; charset=utf-8",
            _ => "application/json",
        }
    }

    /// Schema for document kinds; `None` for opaque binary artifacts.
    pub fn schema(self) -> Option<SchemaKind> {
        Some(match self {
            ArtifactKind::Config => SchemaKind::Config,
            ArtifactKind::ManifestModel => SchemaKind::ManifestModel,
            ArtifactKind::Permissions => SchemaKind::Permissions,
            ArtifactKind::Trackers => SchemaKind::Trackers,
            ArtifactKind::Har => SchemaKind::Har,
            ArtifactKind::FlowMeta => SchemaKind::FlowMeta,
            ArtifactKind::Findings => SchemaKind::Findings,
            ArtifactKind::Entities => SchemaKind::Entities,
            ArtifactKind::Summary => SchemaKind::Summary,
            ArtifactKind::ReportModel => SchemaKind::ReportModel,
            ArtifactKind::Log => SchemaKind::Log,
            ArtifactKind::Pcap | ArtifactKind::Keylog | ArtifactKind::Video | ArtifactKind::ReportHtml => return None,
        })
    }
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub analysis_id: String,
    pub kind: ArtifactKind,
    /// File name inside the analysis directory.
    pub path: String,
    pub schema_version: Option<String>,
    pub sha256: String,
    pub size: u64,
    pub created_at: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppSummary {
    pub id: String,
    pub file_name: String,
    pub format: PackageFormat,
    pub sha256: String,
    pub size: u64,
    pub package_name: String,
    pub version_name: String,
    pub version_code: i64,
}

impl From<&AppPackage> for AppSummary {
    fn from(p: &AppPackage) -> Self {
        AppSummary {
            id: p.id.clone(),
            file_name: p.file_name.clone(),
            format: p.format,
            sha256: p.sha256.clone(),
            size: p.size,
            package_name: p.manifest.package_name.clone(),
            version_name: p.manifest.version_name.clone(),
            version_code: p.manifest.version_code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisIndex {
    pub schema_version: String,
    pub analysis_id: String,
    pub title: String,
    pub created_at: String,
    pub state: State,
    pub app: Option<AppSummary>,
    #[serde(default)]
    pub error: Option<String>,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub analysis_id: String,
    pub title: String,
    pub created_at: String,
    pub state: State,
    pub app: Option<AppSummary>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown analysis {0}")]
    UnknownAnalysis(String),
    #[error("analysis {0} already exists")]
    AlreadyExists(String),
    #[error("invalid identifier {0:?}")]
    InvalidId(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{kind} does not match its schema: {}", issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    SchemaViolation { kind: String, issues: Vec<SchemaIssue> },
    #[error("artifact {0} already stored")]
    DuplicateKind(ArtifactKind),
    #[error("stored {0} does not match its recorded digest")]
    DigestMismatch(String),
    #[error("storage full")]
    StorageFull,
    #[error("package rejected: {0}")]
    Package(#[from] PackageError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::UnknownAnalysis(_) => "UnknownAnalysis",
            StoreError::AlreadyExists(_) => "AlreadyExists",
            StoreError::InvalidId(_) => "InvalidId",
            StoreError::NotFound(_) => "NotFound",
            StoreError::SchemaViolation { .. } => "SchemaViolation",
            StoreError::DuplicateKind(_) => "DuplicateKind",
            StoreError::DigestMismatch(_) => "DigestMismatch",
            StoreError::StorageFull => "StorageFull",
            StoreError::Package(_) => "PackageRejected",
            StoreError::Io(_) => "StorageError",
        }
    }
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        // ENOSPC / EDQUOT
        if matches!(e.raw_os_error(), Some(28) | Some(122)) {
            StoreError::StorageFull
        } else {
            StoreError::Io(e.to_string())
        }
    }
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().ok_or_else(|| StoreError::Io("path has no parent".into()))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        uuid::Uuid::new_v4().simple()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(StoreError::from)
}

pub struct Store {
    root: PathBuf,
    single: bool,
    /// Serializes index read-modify-write cycles.
    index_lock: Mutex<()>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("apps"))?;
        std::fs::create_dir_all(root.join("analyses"))?;
        Ok(Store {
            root,
            single: false,
            index_lock: Mutex::new(()),
        })
    }

    /// Store holding exactly one analysis in `dir` itself.
    pub fn open_single(dir: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = dir.into();
        std::fs::create_dir_all(&root)?;
        Ok(Store {
            root,
            single: true,
            index_lock: Mutex::new(()),
        })
    }

    /// Id of the analysis in a single-analysis store, if created.
    pub fn single_id(&self) -> Option<String> {
        let bytes = std::fs::read(self.root.join("index.json")).ok()?;
        let index: AnalysisIndex = serde_json::from_slice(&bytes).ok()?;
        Some(index.analysis_id)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn analysis_dir(&self, id: &str) -> PathBuf {
        if self.single {
            return self.root.clone();
        }
        self.root.join("analyses").join(id)
    }

    fn apps_root(&self) -> PathBuf {
        self.root.join(if self.single { "app" } else { "apps" })
    }

    fn app_dir(&self, id: &str) -> PathBuf {
        self.apps_root().join(id)
    }

    /// Parses and stores an uploaded package. Uploading identical bytes
    /// again returns the existing record.
    pub fn put_app(&self, file_name: &str, bytes: &[u8]) -> Result<AppPackage, StoreError> {
        let pkg = parse_package(file_name, bytes)?;
        let dir = self.app_dir(&pkg.id);
        if dir.join("package.json").exists() {
            return Ok(self.get_app(&pkg.id)?.0);
        }
        write_atomic(&dir.join("package.bin"), bytes)?;
        let json = serde_json::to_vec_pretty(&pkg).map_err(|e| StoreError::Io(e.to_string()))?;
        write_atomic(&dir.join("package.json"), &json)?;
        Ok(pkg)
    }

    pub fn get_app(&self, id: &str) -> Result<(AppPackage, Vec<u8>), StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.into()));
        }
        let dir = self.app_dir(id);
        let meta = std::fs::read(dir.join("package.json")).map_err(|_| StoreError::NotFound(format!("app {id}")))?;
        let pkg: AppPackage = serde_json::from_slice(&meta).map_err(|e| StoreError::Io(e.to_string()))?;
        let bytes = std::fs::read(dir.join("package.bin")).map_err(|_| StoreError::NotFound(format!("app {id}")))?;
        if sha256_hex(&bytes) != pkg.sha256 {
            return Err(StoreError::DigestMismatch(format!("app {id}")));
        }
        Ok((pkg, bytes))
    }

    pub fn list_apps(&self) -> Result<Vec<AppSummary>, StoreError> {
        let mut out = Vec::new();
        let root = self.apps_root();
        if !root.exists() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(root)? {
            let path = entry?.path().join("package.json");
            if let Ok(text) = std::fs::read(&path) {
                if let Ok(pkg) = serde_json::from_slice::<AppPackage>(&text) {
                    out.push(AppSummary::from(&pkg));
                }
            }
        }
        out.sort_by(|a, b| a.file_name.cmp(&b.file_name).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    pub fn create_analysis(&self, id: &str, title: &str, app: Option<AppSummary>) -> Result<AnalysisIndex, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.into()));
        }
        let _g = self.index_lock.lock().expect("index lock");
        if self.analysis_dir(id).join("index.json").exists() {
            let existing = if self.single { self.single_id().unwrap_or_default() } else { id.into() };
            return Err(StoreError::AlreadyExists(existing));
        }
        let index = AnalysisIndex {
            schema_version: SCHEMA_VERSION.into(),
            analysis_id: id.into(),
            title: title.into(),
            created_at: now_rfc3339(),
            state: State::Created,
            app,
            error: None,
            artifacts: Vec::new(),
        };
        self.write_index(&index)?;
        Ok(index)
    }

    fn write_index(&self, index: &AnalysisIndex) -> Result<(), StoreError> {
        let value = serde_json::to_value(index).map_err(|e| StoreError::Io(e.to_string()))?;
        schema::validate(SchemaKind::Index, &value).map_err(|issues| StoreError::SchemaViolation {
            kind: "index".into(),
            issues,
        })?;
        let bytes = serde_json::to_vec_pretty(&value).map_err(|e| StoreError::Io(e.to_string()))?;
        write_atomic(&self.analysis_dir(&index.analysis_id).join("index.json"), &bytes)
    }

    pub fn index(&self, id: &str) -> Result<AnalysisIndex, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::UnknownAnalysis(id.into()));
        }
        let bytes =
            std::fs::read(self.analysis_dir(id).join("index.json")).map_err(|_| StoreError::UnknownAnalysis(id.into()))?;
        let index: AnalysisIndex =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::Io(format!("index of {id}: {e}")))?;
        if index.analysis_id != id {
            return Err(StoreError::UnknownAnalysis(id.into()));
        }
        Ok(index)
    }

    pub fn set_state(&self, id: &str, state: State, error: Option<String>) -> Result<(), StoreError> {
        let _g = self.index_lock.lock().expect("index lock");
        let mut index = self.index(id)?;
        index.state = state;
        if error.is_some() {
            index.error = error;
        }
        self.write_index(&index)
    }

    /// Stores one artifact. Documents are schema-checked first; nothing is
    /// written if the check fails. Only `log` may be replaced.
    pub fn put_artifact(&self, id: &str, kind: ArtifactKind, bytes: &[u8]) -> Result<ArtifactRecord, StoreError> {
        self.write_artifact(id, kind, bytes, kind == ArtifactKind::Log)
    }

    /// Like `put_artifact` but overwrites an existing artifact of the same
    /// kind. Used for derived documents such as rebuilt reports.
    pub fn replace_artifact(&self, id: &str, kind: ArtifactKind, bytes: &[u8]) -> Result<ArtifactRecord, StoreError> {
        self.write_artifact(id, kind, bytes, true)
    }

    pub fn replace_json<T: Serialize>(&self, id: &str, kind: ArtifactKind, doc: &T) -> Result<ArtifactRecord, StoreError> {
        let bytes = serde_json::to_vec_pretty(doc).map_err(|e| StoreError::Io(e.to_string()))?;
        self.replace_artifact(id, kind, &bytes)
    }

    fn write_artifact(&self, id: &str, kind: ArtifactKind, bytes: &[u8], replace: bool) -> Result<ArtifactRecord, StoreError> {
        let _g = self.index_lock.lock().expect("index lock");
        let mut index = self.index(id)?;
        if !replace && index.artifacts.iter().any(|a| a.kind == kind) {
            return Err(StoreError::DuplicateKind(kind));
        }
        let mut schema_version = None;
        if let Some(schema_kind) = kind.schema() {
            let value: Value = serde_json::from_slice(bytes).map_err(|e| StoreError::SchemaViolation {
                kind: kind.to_string(),
                issues: vec![SchemaIssue {
                    path: String::new(),
                    message: format!("not JSON: {e}"),
                }],
            })?;
            schema::validate(schema_kind, &value).map_err(|issues| StoreError::SchemaViolation {
                kind: kind.to_string(),
                issues,
            })?;
            schema_version = Some(match kind {
                ArtifactKind::Har => value["log"]["version"].as_str().unwrap_or("1.2").to_string(),
                _ => value["schema_version"].as_str().unwrap_or(SCHEMA_VERSION).to_string(),
            });
        }
        let path = self.analysis_dir(id).join(kind.file_name());
        write_atomic(&path, bytes)?;
        let record = ArtifactRecord {
            analysis_id: id.into(),
            kind,
            path: kind.file_name().into(),
            schema_version,
            sha256: sha256_hex(bytes),
            size: bytes.len() as u64,
            created_at: now_rfc3339(),
            media_type: kind.media_type().into(),
        };
        index.artifacts.retain(|a| a.kind != kind);
        index.artifacts.push(record.clone());
        self.write_index(&index)?;
        Ok(record)
    }

    pub fn put_json<T: Serialize>(&self, id: &str, kind: ArtifactKind, doc: &T) -> Result<ArtifactRecord, StoreError> {
        let bytes = serde_json::to_vec_pretty(doc).map_err(|e| StoreError::Io(e.to_string()))?;
        self.put_artifact(id, kind, &bytes)
    }

    pub fn get_artifact(&self, id: &str, kind: ArtifactKind) -> Result<(Vec<u8>, ArtifactRecord), StoreError> {
        let index = self.index(id)?;
        let record = index
            .artifacts
            .into_iter()
            .find(|a| a.kind == kind)
            .ok_or_else(|| StoreError::NotFound(format!("artifact {kind} of {id}")))?;
        let bytes = std::fs::read(self.analysis_dir(id).join(&record.path))
            .map_err(|_| StoreError::NotFound(format!("artifact {kind} of {id}")))?;
        if sha256_hex(&bytes) != record.sha256 {
            return Err(StoreError::DigestMismatch(format!("artifact {kind} of {id}")));
        }
        Ok((bytes, record))
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, id: &str, kind: ArtifactKind) -> Result<T, StoreError> {
        let (bytes, _) = self.get_artifact(id, kind)?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Io(format!("artifact {kind} of {id}: {e}")))
    }

    pub fn has_artifact(&self, id: &str, kind: ArtifactKind) -> bool {
        self.index(id).is_ok_and(|i| i.artifacts.iter().any(|a| a.kind == kind))
    }

    /// Newest first.
    pub fn list_analyses(&self) -> Result<Vec<AnalysisSummary>, StoreError> {
        let mut out = Vec::new();
        let ids: Vec<String> = if self.single {
            self.single_id().into_iter().collect()
        } else {
            std::fs::read_dir(self.root.join("analyses"))?
                .filter_map(|e| e.ok()?.file_name().into_string().ok())
                .collect()
        };
        for id in &ids {
            if let Ok(index) = self.index(id) {
                out.push(AnalysisSummary {
                    analysis_id: index.analysis_id,
                    title: index.title,
                    created_at: index.created_at,
                    state: index.state,
                    app: index.app,
                });
            }
        }
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| b.analysis_id.cmp(&a.analysis_id)));
        Ok(out)
    }
}
