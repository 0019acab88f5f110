//! Analysis sessions: static phase, device preparation, recording module
//! lifecycle and post-processing.

pub mod config;
pub mod device;
pub mod modules;
pub mod pipeline;

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::documents::{Level, LogDoc, LogEvent, Metrics, SummaryDoc};
use crate::package::AppPackage;
use crate::sensitive::DeviceProfile;
use crate::store::{now_rfc3339, ArtifactKind, Store, StoreError};
use config::{AnalysisConfig, InvalidConfig};
use device::{Device, DeviceInfo, DeviceProvider, VideoMeta};
use modules::{ModuleFactory, ModuleOutput, RecordingModule, Routine};
use pipeline::Resources;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum State {
    Created,
    StaticRunning,
    AwaitingDevice,
    Preparing,
    Recording,
    Stopping,
    PostProcessing,
    Complete,
    Failed,
}

impl State {
    pub fn as_str(self) -> &'static str {
        match self {
            State::Created => "Created",
            State::StaticRunning => "StaticRunning",
            State::AwaitingDevice => "AwaitingDevice",
            State::Preparing => "Preparing",
            State::Recording => "Recording",
            State::Stopping => "Stopping",
            State::PostProcessing => "PostProcessing",
            State::Complete => "Complete",
            State::Failed => "Failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, State::Complete | State::Failed)
    }

    pub fn can_transition(self, to: State) -> bool {
        use State::*;
        if to == Failed {
            return !self.is_terminal();
        }
        matches!(
            (self, to),
            (Created, StaticRunning)
                | (StaticRunning, AwaitingDevice)
                | (StaticRunning, Complete)
                | (AwaitingDevice, Preparing)
                | (Preparing, Recording)
                | (Recording, Stopping)
                | (Stopping, PostProcessing)
                | (PostProcessing, Complete)
        )
    }
}

impl std::fmt::Display for State {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    InvalidConfig(#[from] InvalidConfig),
    #[error("unknown analysis {0}")]
    UnknownAnalysis(String),
    #[error("{0}")]
    DeviceUnavailable(String),
    #[error("{0}")]
    MultipleDevices(String),
    #[error("module setup failed: {0}")]
    ModuleSetupFailed(String),
    #[error("session is {0}, not Recording")]
    NotRecording(State),
    #[error("session is {0}, not Created")]
    AlreadyStarted(State),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: State, to: State },
    #[error("post-processing failed: {0}")]
    PostProcessingFailed(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SessionError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InvalidConfig(_) => "InvalidConfig",
            SessionError::UnknownAnalysis(_) => "UnknownAnalysis",
            SessionError::DeviceUnavailable(_) => "DeviceUnavailable",
            SessionError::MultipleDevices(_) => "MultipleDevices",
            SessionError::ModuleSetupFailed(_) => "ModuleSetupFailed",
            SessionError::NotRecording(_) => "NotRecording",
            SessionError::AlreadyStarted(_) => "AlreadyStarted",
            SessionError::IllegalTransition { .. } => "IllegalTransition",
            SessionError::PostProcessingFailed(_) => "PostProcessingFailed",
            SessionError::Store(e) => e.code(),
        }
    }
}

/// Snapshot returned by status polling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub analysis_id: String,
    pub state: State,
    pub error: Option<String>,
    /// Events with `seq >= after`.
    pub events: Vec<LogEvent>,
    /// Offset to pass as `after` on the next poll.
    pub next: u64,
}

#[derive(Debug)]
struct BoardInner {
    state: State,
    error: Option<String>,
    events: Vec<LogEvent>,
}

/// Session state shared with readers. Only the owning session writes.
#[derive(Debug)]
pub struct StatusBoard {
    analysis_id: String,
    inner: Mutex<BoardInner>,
    changed: Condvar,
}

impl StatusBoard {
    fn new(analysis_id: &str) -> Self {
        StatusBoard {
            analysis_id: analysis_id.to_string(),
            inner: Mutex::new(BoardInner {
                state: State::Created,
                error: None,
                events: Vec::new(),
            }),
            changed: Condvar::new(),
        }
    }

    fn push(&self, level: Level, state: Option<State>, message: String) {
        let mut inner = self.inner.lock().expect("board lock");
        let seq = inner.events.len() as u64;
        inner.events.push(LogEvent {
            seq,
            at: now_rfc3339(),
            level,
            state,
            message,
        });
        self.changed.notify_all();
    }

    fn set_state(&self, state: State, error: Option<String>) {
        let mut inner = self.inner.lock().expect("board lock");
        inner.state = state;
        if error.is_some() {
            inner.error = error;
        }
    }

    pub fn state(&self) -> State {
        self.inner.lock().expect("board lock").state
    }

    pub fn events(&self) -> Vec<LogEvent> {
        self.inner.lock().expect("board lock").events.clone()
    }

    pub fn snapshot(&self, after: u64) -> StatusSnapshot {
        let inner = self.inner.lock().expect("board lock");
        Self::snap(&self.analysis_id, &inner, after)
    }

    fn snap(id: &str, inner: &BoardInner, after: u64) -> StatusSnapshot {
        let from = (after as usize).min(inner.events.len());
        StatusSnapshot {
            analysis_id: id.to_string(),
            state: inner.state,
            error: inner.error.clone(),
            events: inner.events[from..].to_vec(),
            next: inner.events.len() as u64,
        }
    }

    /// Blocks until an event with `seq >= after` exists or `timeout` passes.
    pub fn wait(&self, after: u64, timeout: Duration) -> StatusSnapshot {
        let inner = self.inner.lock().expect("board lock");
        let (inner, _) = self
            .changed
            .wait_timeout_while(inner, timeout, |i| (i.events.len() as u64) <= after)
            .expect("board lock");
        Self::snap(&self.analysis_id, &inner, after)
    }
}

/// Everything a session needs from its surroundings.
#[derive(Clone)]
pub struct Environment {
    pub store: Arc<Store>,
    pub devices: Arc<dyn DeviceProvider>,
    pub modules: Arc<dyn ModuleFactory>,
    pub resources: Arc<Resources>,
}

impl Environment {
    pub fn new(store: Arc<Store>) -> Self {
        Environment {
            store,
            devices: Arc::new(device::DefaultDeviceProvider),
            modules: Arc::new(modules::DefaultModuleFactory),
            resources: Arc::new(Resources::default()),
        }
    }
}

/// One call into a recording module, as observed by the session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub module: String,
    pub routine: Routine,
    pub ok: bool,
}

struct Slot {
    module: Box<dyn RecordingModule>,
    started: bool,
}

pub struct Session {
    id: String,
    config: AnalysisConfig,
    app: AppPackage,
    env: Environment,
    board: Arc<StatusBoard>,
    state: State,
    transitions: Vec<(State, State)>,
    device: Option<Box<dyn Device>>,
    device_info: Option<DeviceInfo>,
    profile: Option<DeviceProfile>,
    /// Modules that completed setup, in start order.
    slots: Vec<Slot>,
    trace: Vec<TraceEntry>,
    permissions_count: Option<usize>,
    trackers_count: Option<usize>,
}

impl Session {
    /// Validates the configuration and registers the analysis in the store.
    pub fn create(env: Environment, config: AnalysisConfig) -> Result<Session, SessionError> {
        config.validate()?;
        let (app, _) = env.store.get_app(&config.app_ref).map_err(|e| match e {
            StoreError::NotFound(_) | StoreError::InvalidId(_) => {
                SessionError::InvalidConfig(InvalidConfig(format!("unknown app_ref {}", config.app_ref)))
            }
            other => SessionError::Store(other),
        })?;
        let id = config
            .analysis_id
            .clone()
            .unwrap_or_else(|| format!("an-{}", &uuid::Uuid::new_v4().simple().to_string()[..16]));
        env.store.create_analysis(&id, &config.title, Some((&app).into()))?;
        let mut stored = config.clone();
        stored.analysis_id = Some(id.clone());
        env.store.put_json(&id, ArtifactKind::Config, &stored)?;
        let board = Arc::new(StatusBoard::new(&id));
        board.push(Level::State, Some(State::Created), format!("analysis {id} created"));
        Ok(Session {
            id,
            config: stored,
            app,
            env,
            board,
            state: State::Created,
            transitions: Vec::new(),
            device: None,
            device_info: None,
            profile: None,
            slots: Vec::new(),
            trace: Vec::new(),
            permissions_count: None,
            trackers_count: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn board(&self) -> Arc<StatusBoard> {
        self.board.clone()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Every transition taken so far.
    pub fn transitions(&self) -> &[(State, State)] {
        &self.transitions
    }

    fn log(&self, level: Level, message: impl Into<String>) {
        let message = message.into();
        match level {
            Level::Error => log::error!("[{}] {message}", self.id),
            Level::Warning => log::warn!("[{}] {message}", self.id),
            _ => log::info!("[{}] {message}", self.id),
        }
        self.board.push(level, None, message);
    }

    fn persist_log(&self) {
        if let Err(e) = self.env.store.put_json(&self.id, ArtifactKind::Log, &LogDoc::new(self.board.events())) {
            log::warn!("[{}] could not persist log: {e}", self.id);
        }
    }

    fn go(&mut self, to: State) -> Result<(), SessionError> {
        if !self.state.can_transition(to) {
            return Err(SessionError::IllegalTransition { from: self.state, to });
        }
        self.transitions.push((self.state, to));
        self.state = to;
        self.board.set_state(to, None);
        self.board.push(Level::State, Some(to), format!("state {to}"));
        self.env.store.set_state(&self.id, to, None)?;
        self.persist_log();
        Ok(())
    }

    fn fail(&mut self, err: &SessionError) {
        if self.state.is_terminal() {
            return;
        }
        let message = err.to_string();
        self.log(Level::Error, format!("{}: {message}", err.code()));
        self.transitions.push((self.state, State::Failed));
        self.state = State::Failed;
        self.board.set_state(State::Failed, Some(message.clone()));
        self.board.push(Level::State, Some(State::Failed), "state Failed".into());
        if let Err(e) = self.env.store.set_state(&self.id, State::Failed, Some(message)) {
            log::warn!("[{}] could not record failure: {e}", self.id);
        }
        self.persist_log();
    }

    fn call(&mut self, idx: usize, routine: Routine) -> Result<Option<ModuleOutput>, String> {
        let device = self.device.as_deref_mut().expect("device attached while modules exist");
        let slot = &mut self.slots[idx];
        let result = match routine {
            Routine::Setup => slot.module.setup(device).map(|_| None),
            Routine::Start => slot.module.start(device).map(|_| None),
            Routine::Stop => slot.module.stop(device).map(|_| None),
            Routine::Cleanup => slot.module.cleanup(device).map(|_| None),
            Routine::Postprocess => slot.module.postprocess(device).map(Some),
        };
        let key = slot.module.key().to_string();
        self.trace.push(TraceEntry {
            module: key.clone(),
            routine,
            ok: result.is_ok(),
        });
        result.map_err(|e| format!("{key} {}: {e}", routine.as_str()))
    }

    /// Runs the static phase and, for dynamic analyses, prepares the device
    /// and starts recording. Returns the resulting state.
    pub fn start(&mut self) -> Result<State, SessionError> {
        if self.state != State::Created {
            return Err(SessionError::AlreadyStarted(self.state));
        }
        match self.start_inner() {
            Ok(()) => Ok(self.state),
            Err(e) => {
                self.fail(&e);
                Err(e)
            }
        }
    }

    fn start_inner(&mut self) -> Result<(), SessionError> {
        self.go(State::StaticRunning)?;
        if self.config.static_enabled {
            let report = pipeline::run_static(&self.env.store, &self.id, &self.app, &self.env.resources)?;
            self.permissions_count = Some(report.permissions.len());
            self.trackers_count = Some(report.trackers.len());
            self.log(
                Level::Info,
                format!(
                    "static analysis: {} permissions, {} trackers",
                    report.permissions.len(),
                    report.trackers.len()
                ),
            );
        } else {
            self.env.store.put_json(
                &self.id,
                ArtifactKind::ManifestModel,
                &crate::documents::ManifestModelDoc::from(&self.app),
            )?;
            self.log(Level::Info, "static analysis disabled");
        }
        if !self.config.dynamic_enabled {
            self.write_summary(Metrics::default(), None)?;
            self.publish_report()?;
            return self.go(State::Complete);
        }

        self.go(State::AwaitingDevice)?;
        let mut devices = self
            .env
            .devices
            .attached(&self.config.device)
            .map_err(|e| SessionError::DeviceUnavailable(e.to_string()))?;
        let mut device = match devices.len() {
            0 => return Err(SessionError::DeviceUnavailable("no device attached".into())),
            1 => devices.pop().expect("one device"),
            n => {
                let ids: Vec<String> = devices.iter().map(|d| d.info().identity).collect();
                return Err(SessionError::MultipleDevices(format!("{n} devices attached: {}", ids.join(", "))));
            }
        };
        let info = device.info();
        self.log(Level::Info, format!("device {} ({})", info.identity, info.kind.as_str()));

        self.go(State::Preparing)?;
        match device.extract_profile() {
            Ok(Some(p)) => {
                self.log(Level::Info, format!("device profile: {} values", p.values().len()));
                self.profile = Some(p);
            }
            Ok(None) => self.log(Level::Warning, "device profile unavailable; pattern matching disabled"),
            Err(e) => self.log(Level::Warning, format!("CapabilityMissing: {e}; pattern matching disabled")),
        }
        self.device = Some(device);
        self.device_info = Some(info.clone());

        let method = self.config.recording_method_key.expect("validated: dynamic needs a method");
        let mut start_order: Vec<Box<dyn RecordingModule>> = Vec::new();
        if info.capabilities.screen_record {
            start_order.push(self.env.modules.screen());
        } else {
            self.log(Level::Warning, "CapabilityMissing: device cannot record the screen; continuing without video");
        }
        start_order.extend(self.env.modules.traffic(method));

        for module in start_order {
            self.slots.push(Slot { module, started: false });
            let idx = self.slots.len() - 1;
            if let Err(msg) = self.call(idx, Routine::Setup) {
                self.unwind_after_setup_failure();
                return Err(SessionError::ModuleSetupFailed(msg));
            }
        }
        for idx in 0..self.slots.len() {
            if let Err(msg) = self.call(idx, Routine::Start) {
                self.unwind_after_setup_failure();
                return Err(SessionError::ModuleSetupFailed(msg));
            }
            self.slots[idx].started = true;
            let key = self.slots[idx].module.key().to_string();
            self.log(Level::Info, format!("module {key} started"));
        }
        self.go(State::Recording)?;
        self.board.push(
            Level::Prompt,
            Some(State::Recording),
            "recording: interact with the app, then signal stop".into(),
        );
        Ok(())
    }

    /// Stops started modules and cleans up every module that completed
    /// setup, both in reverse order. The module whose setup failed is the
    /// last slot, so it is cleaned up first.
    fn unwind_after_setup_failure(&mut self) {
        for idx in (0..self.slots.len()).rev() {
            if self.slots[idx].started {
                if let Err(msg) = self.call(idx, Routine::Stop) {
                    self.log(Level::Error, msg);
                }
                self.slots[idx].started = false;
            }
        }
        for idx in (0..self.slots.len()).rev() {
            if let Err(msg) = self.call(idx, Routine::Cleanup) {
                self.log(Level::Error, msg);
            }
        }
        self.restore_device();
    }

    fn restore_device(&mut self) {
        if let Some(d) = self.device.as_deref_mut() {
            match d.restore() {
                Ok(()) => self.board.push(Level::Info, None, "device restored".into()),
                Err(e) => self.board.push(Level::Error, None, format!("device restore failed: {e}")),
            }
        }
    }

    /// Stops recording and runs post-processing through report publication.
    pub fn stop(&mut self) -> Result<State, SessionError> {
        if self.state != State::Recording {
            return Err(SessionError::NotRecording(self.state));
        }
        match self.stop_inner() {
            Ok(()) => Ok(self.state),
            Err(e) => {
                self.fail(&e);
                Err(e)
            }
        }
    }

    fn stop_inner(&mut self) -> Result<(), SessionError> {
        self.go(State::Stopping)?;
        let mut failures = Vec::new();
        for idx in (0..self.slots.len()).rev() {
            if let Err(msg) = self.call(idx, Routine::Stop) {
                self.log(Level::Error, msg.clone());
                failures.push(msg);
            }
            self.slots[idx].started = false;
        }
        for idx in (0..self.slots.len()).rev() {
            if let Err(msg) = self.call(idx, Routine::Cleanup) {
                self.log(Level::Error, msg.clone());
                failures.push(msg);
            }
        }
        if !failures.is_empty() {
            self.restore_device();
            return Err(SessionError::PostProcessingFailed(failures.join("; ")));
        }

        self.go(State::PostProcessing)?;
        let mut outputs = Vec::new();
        for idx in (0..self.slots.len()).rev() {
            match self.call(idx, Routine::Postprocess) {
                Ok(out) => outputs.push(out.unwrap_or_default()),
                Err(msg) => {
                    self.log(Level::Error, msg.clone());
                    failures.push(msg);
                }
            }
        }
        self.restore_device();
        if !failures.is_empty() {
            return Err(SessionError::PostProcessingFailed(failures.join("; ")));
        }

        let mut traffic = None;
        let mut video = None;
        for out in outputs {
            for note in out.notes {
                self.log(Level::Warning, note);
            }
            for (kind, bytes) in out.sidecars {
                self.env.store.put_artifact(&self.id, kind, &bytes)?;
            }
            if let Some(v) = out.video {
                self.env.store.put_artifact(&self.id, ArtifactKind::Video, &v.bytes)?;
                video = Some(v.meta);
            }
            if out.traffic.is_some() {
                traffic = out.traffic;
            }
        }
        let traffic = traffic.ok_or_else(|| SessionError::PostProcessingFailed("no traffic recorded".into()))?;
        self.log(
            Level::Info,
            format!(
                "traffic: {} transactions, {} undecrypted flows",
                traffic.transactions.len(),
                traffic.undecrypted_flows().count()
            ),
        );
        let resolver = pipeline::resolver_for(&self.config.enrichment, Some(self.env.store.root()));
        let outcome = pipeline::run_dynamic(
            &self.env.store,
            &self.id,
            &traffic,
            self.profile.as_ref(),
            &self.config.limits(),
            &resolver,
            &self.env.resources,
        )?;
        self.log(
            Level::Info,
            format!(
                "{} sensitive findings, {} entities",
                outcome.findings.findings.len(),
                outcome.entities.len()
            ),
        );
        if !outcome.findings.rule_misses.is_empty() {
            self.log(Level::Warning, format!("{} adapter rule misses", outcome.findings.rule_misses.len()));
        }
        let mut summary = self.summary_doc(outcome.metrics, video);
        summary.base_time_ms = traffic.base_time_ms;
        self.env.store.put_json(&self.id, ArtifactKind::Summary, &summary)?;
        self.publish_report()?;
        self.go(State::Complete)
    }

    fn summary_doc(&self, mut metrics: Metrics, video: Option<VideoMeta>) -> SummaryDoc {
        metrics.permissions_count = self.permissions_count;
        metrics.trackers_count = self.trackers_count;
        SummaryDoc {
            schema_version: crate::store::SCHEMA_VERSION.into(),
            metrics,
            device: self.device_info.clone(),
            profile_labels: self
                .profile
                .as_ref()
                .map(|p| p.values().into_iter().map(|(l, _)| l).collect())
                .unwrap_or_default(),
            video,
            base_time_ms: 0,
        }
    }

    fn write_summary(&self, metrics: Metrics, video: Option<VideoMeta>) -> Result<(), SessionError> {
        self.env
            .store
            .put_json(&self.id, ArtifactKind::Summary, &self.summary_doc(metrics, video))?;
        Ok(())
    }

    fn publish_report(&self) -> Result<(), SessionError> {
        crate::report::publish(&self.env.store, &self.id)
            .map_err(|e| SessionError::PostProcessingFailed(format!("report: {e}")))?;
        self.board.push(
            Level::Report,
            None,
            format!("report ready: /analyses/{}/report", self.id),
        );
        Ok(())
    }

    /// Runs a session to completion without user interaction: start, then
    /// stop as soon as recording begins.
    pub fn run_headless(&mut self) -> Result<State, SessionError> {
        if self.start()? == State::Recording {
            self.stop()?;
        }
        Ok(self.state)
    }
}

struct Entry {
    session: Arc<Mutex<Session>>,
    board: Arc<StatusBoard>,
}

/// Serializes sessions: at most one is active, the rest wait in a queue.
pub struct Orchestrator {
    env: Environment,
    inner: Mutex<OrchInner>,
}

#[derive(Default)]
struct OrchInner {
    sessions: HashMap<String, Entry>,
    active: Option<String>,
    queue: VecDeque<String>,
}

impl Orchestrator {
    pub fn new(env: Environment) -> Self {
        Orchestrator {
            env,
            inner: Mutex::new(OrchInner::default()),
        }
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    /// Creates a session and starts it, or queues it behind the active one.
    /// Start errors of an immediately started session are returned.
    pub fn submit(&self, config: AnalysisConfig) -> Result<String, SessionError> {
        let session = Session::create(self.env.clone(), config)?;
        let id = session.id().to_string();
        let board = session.board();
        let session = Arc::new(Mutex::new(session));
        let run_now = {
            let mut inner = self.inner.lock().expect("orchestrator lock");
            inner.sessions.insert(
                id.clone(),
                Entry {
                    session: session.clone(),
                    board: board.clone(),
                },
            );
            if inner.active.is_none() {
                inner.active = Some(id.clone());
                true
            } else {
                inner.queue.push_back(id.clone());
                false
            }
        };
        if !run_now {
            board.push(Level::Info, Some(State::Created), "queued behind the active session".into());
            return Ok(id);
        }
        let result = session.lock().expect("session lock").start();
        self.settle();
        result.map(|_| id)
    }

    /// Stops the given session. Sessions started from the queue as a result
    /// run their start phase before this returns.
    pub fn stop(&self, id: &str) -> Result<State, SessionError> {
        let session = self.session(id)?;
        let result = session.lock().expect("session lock").stop();
        self.settle();
        result
    }

    /// Promotes queued sessions while the active one is finished.
    fn settle(&self) {
        loop {
            let next = {
                let mut inner = self.inner.lock().expect("orchestrator lock");
                let active_done = match &inner.active {
                    None => true,
                    Some(a) => inner.sessions.get(a).is_none_or(|e| e.board.state().is_terminal()),
                };
                if !active_done {
                    return;
                }
                inner.active = inner.queue.pop_front();
                match &inner.active {
                    None => return,
                    Some(id) => inner.sessions.get(id).map(|e| e.session.clone()),
                }
            };
            if let Some(s) = next {
                let mut s = s.lock().expect("session lock");
                if let Err(e) = s.start() {
                    log::warn!("queued session {} failed to start: {e}", s.id());
                }
            }
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        self.inner
            .lock()
            .expect("orchestrator lock")
            .sessions
            .get(id)
            .map(|e| e.session.clone())
            .ok_or_else(|| SessionError::UnknownAnalysis(id.to_string()))
    }

    pub fn board(&self, id: &str) -> Option<Arc<StatusBoard>> {
        self.inner
            .lock()
            .expect("orchestrator lock")
            .sessions
            .get(id)
            .map(|e| e.board.clone())
    }

    /// Status of a live session, or of a stored analysis from an earlier run.
    pub fn status(&self, id: &str, after: u64, wait: Option<Duration>) -> Result<StatusSnapshot, SessionError> {
        if let Some(board) = self.board(id) {
            return Ok(match wait {
                Some(t) => board.wait(after, t),
                None => board.snapshot(after),
            });
        }
        let index = self.env.store.index(id).map_err(|e| match e {
            StoreError::UnknownAnalysis(_) | StoreError::InvalidId(_) => SessionError::UnknownAnalysis(id.to_string()),
            other => other.into(),
        })?;
        let events = self
            .env
            .store
            .get_json::<LogDoc>(id, ArtifactKind::Log)
            .map(|d| d.events)
            .unwrap_or_default();
        let from = (after as usize).min(events.len());
        Ok(StatusSnapshot {
            analysis_id: id.to_string(),
            state: index.state,
            error: index.error,
            next: events.len() as u64,
            events: events[from..].to_vec(),
        })
    }
}
