//! Helpers shared by the integration tests: fixture paths, an HTTP/1.1
//! message splitter, a brute-force leak scanner and scripted recording
//! modules. None of these call into the code paths they are used to check.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::Engine;
use regex::Regex;

use privlens_core::capture::model::TrafficLog;
use privlens_core::session::config::{DeviceChoice, DeviceKind, RecordingMethod};
use privlens_core::session::device::{
    Capabilities, Device, DeviceError, DeviceInfo, DeviceProvider, RecordedScreen, RecordedTraffic,
};
use privlens_core::session::modules::{ModuleError, ModuleFactory, ModuleOutput, RecordingModule, Routine, ScreenModule};
use privlens_core::sensitive::DeviceProfile;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn demo_dir() -> PathBuf {
    fixtures().join("demo")
}

pub fn read(rel: &str) -> Vec<u8> {
    std::fs::read(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn b64(text: &str) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD.decode(text).expect("fixture base64")
}

// ---------------------------------------------------------------------------
// HTTP/1.1 messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct HttpMessage {
    pub start_line: String,
    pub headers: Vec<(String, String)>,
    /// De-chunked body.
    pub body: Vec<u8>,
}

impl HttpMessage {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Request target split into (path, raw query).
    pub fn target(&self) -> (String, Option<String>) {
        let target = self.start_line.split(' ').nth(1).unwrap_or("");
        match target.split_once('?') {
            Some((p, q)) => (p.to_string(), Some(q.to_string())),
            None => (target.to_string(), None),
        }
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Splits a byte stream of back-to-back HTTP/1.1 messages. Bodies are framed
/// by Content-Length or chunked encoding; responses without either run to
/// the end of the stream.
pub fn split_messages(mut data: &[u8]) -> Vec<HttpMessage> {
    let mut out = Vec::new();
    while !data.is_empty() {
        let end = find(data, b"\r\n\r\n").expect("header terminator");
        let head = std::str::from_utf8(&data[..end]).expect("ASCII head");
        let mut lines = head.split("\r\n");
        let start_line = lines.next().unwrap().to_string();
        let headers: Vec<(String, String)> = lines
            .map(|l| {
                let (n, v) = l.split_once(':').expect("header colon");
                (n.to_string(), v.trim_start().to_string())
            })
            .collect();
        let mut rest = &data[end + 4..];
        let get = |n: &str| headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(n)).map(|(_, v)| v.clone());
        let body = if get("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
            let mut body = Vec::new();
            loop {
                let line_end = find(rest, b"\r\n").unwrap();
                let size = usize::from_str_radix(std::str::from_utf8(&rest[..line_end]).unwrap().trim(), 16).unwrap();
                rest = &rest[line_end + 2..];
                if size == 0 {
                    rest = &rest[2..];
                    break;
                }
                body.extend_from_slice(&rest[..size]);
                rest = &rest[size + 2..];
            }
            body
        } else if let Some(len) = get("content-length") {
            let len: usize = len.parse().unwrap();
            let b = rest[..len].to_vec();
            rest = &rest[len..];
            b
        } else if start_line.starts_with("HTTP/") && !start_line.contains(" 204 ") && !start_line.contains(" 304 ") {
            let b = rest.to_vec();
            rest = &[];
            b
        } else {
            Vec::new()
        };
        out.push(HttpMessage { start_line, headers, body });
        data = rest;
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force leak scanner
// ---------------------------------------------------------------------------

/// One hit of the brute-force scanner.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hit {
    pub location: String,
    pub component: String,
    pub label: String,
    /// Layers applied from the raw component down to the matching text.
    pub chain: Vec<String>,
    /// Keys followed inside decoded structures.
    pub inner: String,
}

pub struct BrutePattern {
    label: String,
    regex: Regex,
}

/// Literal, hyphen-stripped and percent-encoded variants of every profile
/// value, matched case-insensitively. Values under 8 characters only match
/// between non-alphanumeric boundaries.
pub fn brute_patterns(profile: &DeviceProfile) -> Vec<BrutePattern> {
    let mut fields: Vec<(String, String)> = Vec::new();
    for (label, v) in [
        ("advertising_id", &profile.advertising_id),
        ("model", &profile.model),
        ("manufacturer", &profile.manufacturer),
        ("chip_architecture", &profile.chip_architecture),
        ("os_version", &profile.os_version),
    ] {
        if let Some(v) = v.as_ref().filter(|v| !v.is_empty()) {
            fields.push((label.to_string(), v.clone()));
        }
    }
    for e in &profile.extra {
        fields.push((e.name.clone(), e.value.clone()));
    }
    let mut out = Vec::new();
    for (label, value) in fields {
        let mut variants = BTreeSet::new();
        for v in [value.clone(), value.replace('-', "")] {
            let mut enc = String::new();
            for b in v.bytes() {
                if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
                    enc.push(b as char);
                } else {
                    enc.push_str(&format!("%{b:02X}"));
                }
            }
            variants.insert(v);
            variants.insert(enc);
        }
        let alts: Vec<String> = variants.iter().filter(|v| !v.is_empty()).map(|v| regex::escape(v)).collect();
        let core = format!("(?:{})", alts.join("|"));
        let src = if value.chars().count() < 8 {
            format!("(?i)(?:^|[^A-Za-z0-9]){core}(?:$|[^A-Za-z0-9])")
        } else {
            format!("(?i){core}")
        };
        out.push(BrutePattern {
            label,
            regex: Regex::new(&src).unwrap(),
        });
    }
    out
}

fn percent_decode(raw: &[u8], plus_space: bool) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    let mut changed = false;
    while i < raw.len() {
        match raw[i] {
            b'%' if i + 2 < raw.len() => {
                let hex = std::str::from_utf8(&raw[i + 1..i + 3]).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 3;
                changed = true;
            }
            b'+' if plus_space => {
                out.push(b' ');
                i += 1;
                changed = true;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    changed.then_some(out)
}

fn base64_variants(raw: &[u8]) -> Vec<Vec<u8>> {
    use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
    let text: Vec<u8> = raw.iter().copied().filter(|b| !b.is_ascii_whitespace()).collect();
    if text.len() < 4 {
        return Vec::new();
    }
    let mut out: Vec<Vec<u8>> = Vec::new();
    for engine in [STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD] {
        if let Ok(b) = engine.decode(&text) {
            if !out.contains(&b) {
                out.push(b);
            }
        }
    }
    out
}

/// Every decoding the scanner tries, without any plausibility guard.
/// Items are (layer, key path, decoded bytes, decoded bytes are a form value).
fn expansions(raw: &[u8], form_context: bool) -> Vec<(&'static str, String, Vec<u8>, bool)> {
    let mut out = Vec::new();
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut d = flate2::read::GzDecoder::new(raw);
        let mut buf = Vec::new();
        if d.read_to_end(&mut buf).is_ok() {
            out.push(("gzip", String::new(), buf, false));
        }
    }
    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(raw) {
        if v.is_object() || v.is_array() {
            let mut leaves = Vec::new();
            json_leaves(&v, String::new(), &mut leaves);
            for (k, text) in leaves {
                out.push(("json", k, text.into_bytes(), false));
            }
        }
    }
    if let Ok(text) = std::str::from_utf8(raw) {
        if text.contains('=') && text.contains('&') {
            for pair in text.split('&') {
                let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
                out.push(("form", format!(".{k}"), v.as_bytes().to_vec(), true));
            }
        }
    }
    if let Some(d) = percent_decode(raw, form_context) {
        out.push(("url", String::new(), d, false));
    }
    for d in base64_variants(raw) {
        out.push(("base64", String::new(), d, false));
    }
    out
}

fn json_leaves(v: &serde_json::Value, path: String, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, c) in m {
                json_leaves(c, format!("{path}.{k}"), out);
            }
        }
        serde_json::Value::Array(a) => {
            for (i, c) in a.iter().enumerate() {
                json_leaves(c, format!("{path}[{i}]"), out);
            }
        }
        serde_json::Value::String(s) => out.push((path, s.clone())),
        serde_json::Value::Null => {}
        other => out.push((path, other.to_string())),
    }
}

/// Recursively expands `raw` and reports, per label, the deepest nodes whose
/// text matches. A node is not reported for a label that one of its
/// expansions already reports.
fn scan_node(raw: &[u8], form_context: bool, chain: &[String], inner: &str, pats: &[BrutePattern], depth: usize) -> Vec<(String, Vec<String>, String)> {
    let mut hits: Vec<(String, Vec<String>, String)> = Vec::new();
    if depth < 12 {
        for (layer, key, child, child_form) in expansions(raw, form_context) {
            let mut c = chain.to_vec();
            c.push(layer.to_string());
            for h in scan_node(&child, child_form, &c, &format!("{inner}{key}"), pats, depth + 1) {
                if !hits.contains(&h) {
                    hits.push(h);
                }
            }
        }
    }
    let text = String::from_utf8_lossy(raw);
    for p in pats {
        if hits.iter().any(|(l, _, _)| *l == p.label) {
            continue;
        }
        if p.regex.is_match(&text) {
            hits.push((p.label.clone(), chain.to_vec(), inner.to_string()));
        }
    }
    hits
}

/// Scans the request components (headers except Cookie, cookies, query
/// parameters, request body) and the response body of one exchange.
pub fn brute_scan(req: &HttpMessage, resp: Option<&HttpMessage>, pats: &[BrutePattern]) -> Vec<Hit> {
    let mut comps: Vec<(&str, String, Vec<u8>, bool)> = Vec::new();
    for (n, v) in &req.headers {
        if n.eq_ignore_ascii_case("cookie") {
            for pair in v.split(';') {
                let pair = pair.trim();
                if pair.is_empty() {
                    continue;
                }
                let (k, val) = pair.split_once('=').unwrap_or((pair, ""));
                comps.push(("cookie", k.to_string(), val.as_bytes().to_vec(), false));
            }
        } else {
            comps.push(("header", n.clone(), v.as_bytes().to_vec(), false));
        }
    }
    if let (_, Some(q)) = req.target() {
        for pair in q.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            comps.push(("query_param", k.to_string(), v.as_bytes().to_vec(), true));
        }
    }
    if !req.body.is_empty() {
        comps.push(("request_body", String::new(), req.body.clone(), false));
    }
    if let Some(r) = resp.filter(|r| !r.body.is_empty()) {
        comps.push(("response_body", String::new(), r.body.clone(), false));
    }
    let mut out = Vec::new();
    for (loc, name, raw, form) in comps {
        for (label, chain, inner) in scan_node(&raw, form, &[], "", pats, 0) {
            out.push(Hit {
                location: loc.to_string(),
                component: name.clone(),
                label,
                chain,
                inner,
            });
        }
    }
    out.sort();
    out.dedup();
    out
}

// ---------------------------------------------------------------------------
// Scripted device and modules
// ---------------------------------------------------------------------------

pub struct ScriptedDevice {
    pub screen: bool,
    pub restores: Arc<Mutex<usize>>,
}

impl Device for ScriptedDevice {
    fn info(&self) -> DeviceInfo {
        DeviceInfo {
            kind: DeviceKind::Replay,
            identity: "scripted".into(),
            capabilities: Capabilities {
                screen_record: self.screen,
                profile_extraction: false,
            },
        }
    }
    fn extract_profile(&mut self) -> Result<Option<DeviceProfile>, DeviceError> {
        Ok(None)
    }
    fn recorded_screen(&mut self) -> Result<Option<RecordedScreen>, DeviceError> {
        Ok(None)
    }
    fn recorded_traffic(&mut self, _m: RecordingMethod) -> Result<RecordedTraffic, DeviceError> {
        Err(DeviceError::Unavailable("scripted device records nothing".into()))
    }
    fn restore(&mut self) -> Result<(), DeviceError> {
        *self.restores.lock().unwrap() += 1;
        Ok(())
    }
}

pub struct ScriptedProvider {
    pub screen: bool,
    pub restores: Arc<Mutex<usize>>,
}

impl DeviceProvider for ScriptedProvider {
    fn attached(&self, _c: &DeviceChoice) -> Result<Vec<Box<dyn Device>>, DeviceError> {
        Ok(vec![Box::new(ScriptedDevice {
            screen: self.screen,
            restores: self.restores.clone(),
        })])
    }
}

/// Module that fails the routines named in `fail`. The last traffic module
/// yields an empty traffic log from postprocess.
pub struct ScriptedModule {
    pub key: String,
    pub fail: Vec<Routine>,
    pub yields_traffic: bool,
}

impl ScriptedModule {
    fn run(&self, r: Routine) -> Result<(), ModuleError> {
        if self.fail.contains(&r) {
            Err(ModuleError::Failed(format!("scripted {} failure", r.as_str())))
        } else {
            Ok(())
        }
    }
}

impl RecordingModule for ScriptedModule {
    fn key(&self) -> &str {
        &self.key
    }
    fn setup(&mut self, _d: &mut dyn Device) -> Result<(), ModuleError> {
        self.run(Routine::Setup)
    }
    fn start(&mut self, _d: &mut dyn Device) -> Result<(), ModuleError> {
        self.run(Routine::Start)
    }
    fn stop(&mut self, _d: &mut dyn Device) -> Result<(), ModuleError> {
        self.run(Routine::Stop)
    }
    fn cleanup(&mut self, _d: &mut dyn Device) -> Result<(), ModuleError> {
        self.run(Routine::Cleanup)
    }
    fn postprocess(&mut self, _d: &mut dyn Device) -> Result<ModuleOutput, ModuleError> {
        self.run(Routine::Postprocess)?;
        Ok(ModuleOutput {
            traffic: self.yields_traffic.then(TrafficLog::default),
            ..Default::default()
        })
    }
}

/// Screen module plus `traffic` scripted traffic modules; failures keyed by
/// module key.
pub struct ScriptedFactory {
    pub traffic: usize,
    pub fail: HashMap<String, Vec<Routine>>,
}

impl ModuleFactory for ScriptedFactory {
    fn screen(&self) -> Box<dyn RecordingModule> {
        match self.fail.get("screen") {
            Some(f) => Box::new(ScriptedModule {
                key: "screen".into(),
                fail: f.clone(),
                yields_traffic: false,
            }),
            None => Box::new(ScreenModule),
        }
    }

    fn traffic(&self, _m: RecordingMethod) -> Vec<Box<dyn RecordingModule>> {
        (0..self.traffic)
            .map(|i| {
                let key = format!("traffic{i}");
                Box::new(ScriptedModule {
                    fail: self.fail.get(&key).cloned().unwrap_or_default(),
                    key,
                    yields_traffic: i + 1 == self.traffic,
                }) as Box<dyn RecordingModule>
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// REST calls against the router, without a socket
// ---------------------------------------------------------------------------

pub mod rest {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use axum::Router;
    use http_body_util::BodyExt;
    use serde_json::Value;
    use tower::ServiceExt;

    pub const BOUNDARY: &str = "privlens-test-boundary";

    pub async fn raw(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = app.clone().oneshot(req).await.expect("router is infallible");
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let mut b = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                b = b.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let (status, bytes) = raw(app, b.body(body).unwrap()).await;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
        };
        (status, value)
    }

    pub fn multipart(file_name: &str, bytes: &[u8]) -> Request<Body> {
        let mut body = Vec::new();
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{file_name}\"\r\nContent-Type: application/vnd.android.package-archive\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
        Request::builder()
            .method("POST")
            .uri("/apps")
            .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
            .body(Body::from(body))
            .unwrap()
    }

    /// Polls status until the analysis reaches `state` or a terminal state.
    pub async fn wait_for(app: &Router, id: &str, state: &str) -> Value {
        let mut after = 0u64;
        let mut last = Value::Null;
        for _ in 0..400 {
            let (code, snap) = json(app, "GET", &format!("/analyses/{id}/status?after={after}&wait_ms=250"), None).await;
            assert_eq!(code, StatusCode::OK, "{snap}");
            after = snap["next"].as_u64().unwrap_or(after);
            let s = snap["state"].as_str().unwrap_or_default().to_string();
            last = snap;
            if s == state || s == "Complete" || s == "Failed" {
                return last;
            }
        }
        panic!("analysis {id} never reached {state}: {last}");
    }
}
