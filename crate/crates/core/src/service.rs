//! REST interface over the orchestrator and result store.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State as AxState};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::report::ReportError;
use crate::session::config::{AnalysisConfig, EnrichmentSettings, InvalidConfig, ProviderConfig};
use crate::session::{Environment, Orchestrator, SessionError, State};
use crate::store::{ArtifactKind, Store, StoreError};

pub const DEFAULT_PORT: u16 = 8470;
pub const DEFAULT_UPLOAD_LIMIT: usize = 500 * 1024 * 1024;
pub const MAX_LONG_POLL: Duration = Duration::from_secs(25);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub bind: IpAddr,
    pub port: u16,
    pub data_dir: PathBuf,
    pub upload_limit_bytes: usize,
    /// Applied to analyses whose configuration names no provider.
    pub enrichment: EnrichmentSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_PORT,
            data_dir: PathBuf::from("privlens-data"),
            upload_limit_bytes: DEFAULT_UPLOAD_LIMIT,
            enrichment: EnrichmentSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SettingsError {
    #[error("reading {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("parsing settings: {0}")]
    Parse(String),
}

impl Settings {
    /// Loads a TOML file (optional), then applies `PRIVLENS_*` overrides
    /// from `env`.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Settings, SettingsError> {
        let mut s = match file {
            None => Settings::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| SettingsError::Io(p.to_path_buf(), e))?;
                toml::from_str(&text).map_err(|e| SettingsError::Parse(e.to_string()))?
            }
        };
        let mut endpoint = None;
        let mut api_key = None;
        for (k, v) in env {
            match k.as_str() {
                "PRIVLENS_PORT" => s.port = v.parse().map_err(|_| SettingsError::Parse(format!("PRIVLENS_PORT={v}")))?,
                "PRIVLENS_BIND" => s.bind = v.parse().map_err(|_| SettingsError::Parse(format!("PRIVLENS_BIND={v}")))?,
                "PRIVLENS_DATA_DIR" => s.data_dir = PathBuf::from(v),
                "PRIVLENS_OFFLINE" => s.enrichment.offline = matches!(v.as_str(), "1" | "true" | "yes"),
                "PRIVLENS_WHOIS_ENDPOINT" => endpoint = Some(v),
                "PRIVLENS_WHOIS_API_KEY" => api_key = Some(v),
                _ => {}
            }
        }
        if let Some(endpoint) = endpoint {
            s.enrichment.provider = Some(ProviderConfig::Http {
                endpoint,
                api_key,
                timeout_ms: None,
            });
        } else if let (Some(key), Some(ProviderConfig::Http { api_key, .. })) = (api_key, s.enrichment.provider.as_mut()) {
            *api_key = Some(key);
        }
        Ok(s)
    }
}

/// Error body of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

pub struct Failure {
    status: StatusCode,
    body: ApiError,
}

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Failure {
            status,
            body: ApiError {
                code: code.into(),
                message: message.into(),
                details: None,
            },
        }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.body.details = Some(details);
        self
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// HTTP status for an error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "InvalidConfig" | "InvalidId" | "BadRequest" => StatusCode::BAD_REQUEST,
        "UnknownAnalysis" | "NotFound" | "MissingArtifact" => StatusCode::NOT_FOUND,
        "NotRecording" | "DuplicateKind" | "AlreadyExists" | "AlreadyStarted" => StatusCode::CONFLICT,
        "PayloadTooLarge" => StatusCode::PAYLOAD_TOO_LARGE,
        "PackageRejected" | "UnsupportedPackage" => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn fail(code: &str, message: impl Into<String>) -> Failure {
    Failure::new(status_for(code), code, message)
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        fail(e.code(), e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        fail(e.code(), e.to_string())
    }
}

impl From<InvalidConfig> for Failure {
    fn from(e: InvalidConfig) -> Self {
        fail("InvalidConfig", e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        fail(e.code(), e.to_string())
    }
}

pub struct AppState {
    pub orchestrator: Orchestrator,
    pub settings: Settings,
}

impl AppState {
    pub fn new(settings: Settings) -> Result<Self, StoreError> {
        let store = Arc::new(Store::open(&settings.data_dir)?);
        Ok(Self::with_environment(settings, Environment::new(store)))
    }

    pub fn with_environment(settings: Settings, env: Environment) -> Self {
        AppState {
            orchestrator: Orchestrator::new(env),
            settings,
        }
    }

    fn store(&self) -> &Store {
        &self.orchestrator.env().store
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let limit = state.settings.upload_limit_bytes;
    Router::new()
        .route("/apps", post(upload_app).get(list_apps))
        .route("/analyses", post(start_analysis).get(list_analyses))
        .route("/analyses/:id/status", get(status))
        .route("/analyses/:id/stop", post(stop))
        .route("/analyses/:id/report", get(report))
        .route("/analyses/:id/report.html", get(report_html))
        .route("/analyses/:id/artifacts/:kind", get(artifact))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| fail("Internal", format!("worker failed: {e}")))
}

async fn upload_app(AxState(st): AxState<Shared>, mut form: Multipart) -> Result<Response, Failure> {
    let mut upload = None;
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.file_name().map(str::to_string).or_else(|| field.name().map(str::to_string));
        let bytes = field.bytes().await.map_err(multipart_error)?;
        if upload.is_none() {
            upload = Some((name.unwrap_or_else(|| "upload.apk".into()), bytes));
        }
    }
    let (name, bytes) = upload.ok_or_else(|| fail("BadRequest", "multipart body has no file part"))?;
    // Packages are ZIP containers; reject anything else before parsing.
    if !bytes.starts_with(b"PK\x03\x04") {
        return Err(fail("UnsupportedPackage", "upload is not a ZIP-based package"));
    }
    let file_name = Path::new(&name)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "upload.apk".into());
    let st2 = st.clone();
    let app = blocking(move || st2.store().put_app(&file_name, &bytes)).await??;
    Ok((StatusCode::CREATED, Json(crate::store::AppSummary::from(&app))).into_response())
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> Failure {
    let status = e.status();
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        fail("PayloadTooLarge", e.body_text())
    } else {
        fail("BadRequest", e.body_text())
    }
}

async fn list_apps(AxState(st): AxState<Shared>) -> Result<Response, Failure> {
    Ok(Json(st.store().list_apps()?).into_response())
}

async fn start_analysis(AxState(st): AxState<Shared>, body: axum::body::Bytes) -> Result<Response, Failure> {
    let value: Value = serde_json::from_slice(&body).map_err(|e| fail("InvalidConfig", format!("body is not JSON: {e}")))?;
    let mut config = AnalysisConfig::from_value(value)?;
    config.require_fixture()?;
    let defaults = &st.settings.enrichment;
    if defaults.offline {
        config.enrichment.offline = true;
    } else if config.enrichment.provider.is_none() && !config.enrichment.offline {
        config.enrichment.provider = defaults.provider.clone();
    }
    let st2 = st.clone();
    let id = blocking(move || st2.orchestrator.submit(config)).await??;
    let state = st.orchestrator.status(&id, 0, None).map(|s| s.state).unwrap_or(State::Created);
    Ok((StatusCode::CREATED, Json(serde_json::json!({"analysis_id": id, "state": state}))).into_response())
}

async fn list_analyses(AxState(st): AxState<Shared>) -> Result<Response, Failure> {
    Ok(Json(st.store().list_analyses()?).into_response())
}

#[derive(Debug, Deserialize)]
struct StatusQuery {
    #[serde(default)]
    after: u64,
    /// Long-poll budget in milliseconds, capped at 25 s.
    wait_ms: Option<u64>,
}

async fn status(
    AxState(st): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StatusQuery>,
) -> Result<Response, Failure> {
    let wait = Duration::from_millis(q.wait_ms.unwrap_or(MAX_LONG_POLL.as_millis() as u64)).min(MAX_LONG_POLL);
    let snap = blocking(move || st.orchestrator.status(&id, q.after, Some(wait))).await??;
    Ok(Json(snap).into_response())
}

async fn stop(AxState(st): AxState<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    let state = st.orchestrator.status(&id, u64::MAX, None)?.state;
    if state != State::Recording {
        return Err(SessionError::NotRecording(state).into());
    }
    let st2 = st.clone();
    let id2 = id.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = st2.orchestrator.stop(&id2) {
            log::warn!("stop of {id2} failed: {e}");
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({"analysis_id": id, "state": State::Stopping})),
    )
        .into_response())
}

fn load(st: &AppState, id: &str, kind: ArtifactKind) -> Result<Vec<u8>, Failure> {
    let store = st.store();
    store.index(id).map_err(|e| match e {
        StoreError::InvalidId(_) => fail("UnknownAnalysis", format!("unknown analysis {id}")),
        other => other.into(),
    })?;
    match store.get_artifact(id, kind) {
        Ok((bytes, _)) => Ok(bytes),
        Err(StoreError::NotFound(_)) => Err(fail("NotFound", format!("analysis {id} has no {kind} artifact"))
            .with_details(serde_json::json!({"kind": kind}))),
        Err(e) => Err(e.into()),
    }
}

fn bytes_response(kind: ArtifactKind, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, kind.media_type())], Body::from(bytes)).into_response()
}

async fn report(AxState(st): AxState<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    Ok(bytes_response(ArtifactKind::ReportModel, load(&st, &id, ArtifactKind::ReportModel)?))
}

async fn report_html(AxState(st): AxState<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    Ok(bytes_response(ArtifactKind::ReportHtml, load(&st, &id, ArtifactKind::ReportHtml)?))
}

async fn artifact(
    AxState(st): AxState<Shared>,
    UrlPath((id, kind)): UrlPath<(String, String)>,
) -> Result<Response, Failure> {
    let kind = ArtifactKind::parse(&kind).ok_or_else(|| fail("NotFound", format!("unknown artifact kind {kind}")))?;
    Ok(bytes_response(kind, load(&st, &id, kind)?))
}

/// Binds and serves until interrupted.
pub async fn serve(settings: Settings) -> std::io::Result<()> {
    let addr = SocketAddr::new(settings.bind, settings.port);
    let state = AppState::new(settings).map_err(|e| std::io::Error::other(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
