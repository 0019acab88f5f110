//! HAR 1.2 import and export.
//!
//! Fields HAR has no slot for (transaction id, source, TLS details, server
//! port, truncation flags, base time) travel in `_privlens` extension objects
//! so that import of an export reproduces the transactions exactly.

use base64::Engine;
use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde_json::{json, Value};

use super::model::{Body, Cookie, Header, HttpTransaction, Source, TlsInfo, TrafficLog, Url};
use crate::schema::{self, SchemaKind};

pub const CREATOR_NAME: &str = "privlens";
const EXT: &str = "_privlens";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarError {
    #[error("HAR is not valid JSON: {0}")]
    Json(String),
    #[error("HAR schema violation{}: {message}", entry_index.map(|i| format!(" in entry {i}")).unwrap_or_default())]
    SchemaViolation { entry_index: Option<usize>, message: String },
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

fn format_time(ms: i64) -> String {
    Utc.timestamp_millis_opt(ms)
        .single()
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn parse_time(text: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(text).ok().map(|t| t.timestamp_millis())
}

fn name_values<T>(items: &[T], f: impl Fn(&T) -> (&str, &str)) -> Value {
    Value::Array(
        items
            .iter()
            .map(|i| {
                let (n, v) = f(i);
                json!({"name": n, "value": v})
            })
            .collect(),
    )
}

/// Returns (text, encoding) where encoding is `Some("base64")` for non-UTF-8 bytes.
fn body_text(bytes: &[u8]) -> (String, Option<&'static str>) {
    match std::str::from_utf8(bytes) {
        Ok(s) => (s.to_string(), None),
        Err(_) => (b64().encode(bytes), Some("base64")),
    }
}

fn export_entry(tx: &HttpTransaction, base_time_ms: i64) -> Value {
    let mut request = json!({
        "method": tx.method,
        "url": tx.url.to_string(),
        "httpVersion": tx.http_version,
        "cookies": name_values(&tx.cookies, |c| (&c.name, &c.value)),
        "headers": name_values(&tx.request_headers, |h| (&h.name, &h.value)),
        "queryString": name_values(&tx.url.params(), |p| (&p.name, &p.value)),
        "headersSize": -1,
        "bodySize": tx.request_body.bytes.len(),
    });
    if !tx.request_body.bytes.is_empty() || tx.request_body.mime_type.is_some() {
        let (text, enc) = body_text(&tx.request_body.bytes);
        let mut post = json!({
            "mimeType": tx.request_body.mime_type.clone().unwrap_or_default(),
            "text": text,
        });
        if let Some(e) = enc {
            post["_encoding"] = json!(e);
        }
        request["postData"] = post;
    }

    let (text, enc) = body_text(&tx.response_body.bytes);
    let mut content = json!({
        "size": tx.response_body.bytes.len(),
        "mimeType": tx.response_body.mime_type.clone().unwrap_or_default(),
        "text": text,
    });
    if let Some(e) = enc {
        content["encoding"] = json!(e);
    }
    let response = json!({
        "status": tx.status,
        "statusText": tx.status_text,
        "httpVersion": tx.http_version,
        "cookies": [],
        "headers": name_values(&tx.response_headers, |h| (&h.name, &h.value)),
        "content": content,
        "redirectURL": super::model::header_value(&tx.response_headers, "location").unwrap_or(""),
        "headersSize": -1,
        "bodySize": tx.response_body.bytes.len(),
    });

    let mut ext = json!({
        "id": tx.id,
        "source": tx.source.as_str(),
        "started_at_ms": tx.started_at,
        "request_body_truncated": tx.request_body.truncated,
        "response_body_truncated": tx.response_body.truncated,
        "request_mime_type": tx.request_body.mime_type,
        "response_mime_type": tx.response_body.mime_type,
    });
    if let Some(p) = tx.server_port {
        ext["server_port"] = json!(p);
    }
    ext["tls"] = match &tx.tls {
        Some(t) => serde_json::to_value(t).expect("tls info serializes"),
        None => Value::Null,
    };

    let mut entry = json!({
        "startedDateTime": format_time(base_time_ms + tx.started_at),
        "time": tx.duration_ms,
        "request": request,
        "response": response,
        "cache": {},
        "timings": {"send": 0, "wait": tx.duration_ms, "receive": 0},
    });
    if let Some(ip) = &tx.server_ip {
        entry["serverIPAddress"] = json!(ip);
    }
    entry[EXT] = ext;
    entry
}

/// Serializes a traffic log as a HAR 1.2 document.
pub fn export_har(log: &TrafficLog) -> Value {
    let entries: Vec<Value> = log
        .transactions
        .iter()
        .map(|tx| export_entry(tx, log.base_time_ms))
        .collect();
    json!({
        "log": {
            "version": "1.2",
            "creator": {"name": CREATOR_NAME, "version": env!("CARGO_PKG_VERSION")},
            "entries": entries,
            EXT: {"schema_version": "1.0", "base_time_ms": log.base_time_ms},
        }
    })
}

/// Pretty-printed export, newline-terminated.
pub fn export_har_string(log: &TrafficLog) -> String {
    let mut s = serde_json::to_string_pretty(&export_har(log)).expect("HAR serializes");
    s.push('\n');
    s
}

fn entry_index_of(path: &str) -> Option<usize> {
    let mut parts = path.split('/');
    while let Some(p) = parts.next() {
        if p == "entries" {
            return parts.next()?.parse().ok();
        }
    }
    None
}

fn violation(entry_index: Option<usize>, message: impl Into<String>) -> HarError {
    HarError::SchemaViolation {
        entry_index,
        message: message.into(),
    }
}

fn str_of<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn read_pairs(v: Option<&Value>) -> Vec<(String, String)> {
    v.and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .map(|nv| (str_of(nv, "name").to_string(), str_of(nv, "value").to_string()))
                .collect()
        })
        .unwrap_or_default()
}

fn decode_text(text: &str, encoding: Option<&str>, idx: usize) -> Result<Vec<u8>, HarError> {
    match encoding {
        Some(e) if e.eq_ignore_ascii_case("base64") => b64()
            .decode(text.trim())
            .map_err(|err| violation(Some(idx), format!("bad base64 body: {err}"))),
        _ => Ok(text.as_bytes().to_vec()),
    }
}

fn none_if_empty(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_string())
}

fn import_entry(e: &Value, idx: usize, base_time_ms: i64) -> Result<HttpTransaction, HarError> {
    let ext = e.get(EXT).cloned().unwrap_or(Value::Null);
    let req = &e["request"];
    let resp = &e["response"];
    let url = Url::parse(str_of(req, "url")).ok_or_else(|| violation(Some(idx), "request.url is not an absolute URL"))?;
    let started_abs = parse_time(str_of(e, "startedDateTime"))
        .ok_or_else(|| violation(Some(idx), "startedDateTime is not an ISO 8601 date-time"))?;
    let started_at = ext
        .get("started_at_ms")
        .and_then(Value::as_i64)
        .unwrap_or(started_abs - base_time_ms);

    let ext_mime = |key: &str, fallback: &str| match ext.get(key) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Null) => None,
        _ => none_if_empty(fallback),
    };

    let request_body = match req.get("postData") {
        Some(pd) => {
            let enc = pd.get("_encoding").or_else(|| pd.get("encoding")).and_then(Value::as_str);
            let bytes = match pd.get("text").and_then(Value::as_str) {
                Some(t) => decode_text(t, enc, idx)?,
                None => {
                    // params-only postData: rebuild the urlencoded form
                    let params = read_pairs(pd.get("params"));
                    params
                        .iter()
                        .map(|(n, v)| format!("{}={}", super::model::encode_component(n), super::model::encode_component(v)))
                        .collect::<Vec<_>>()
                        .join("&")
                        .into_bytes()
                }
            };
            Body {
                bytes,
                mime_type: ext_mime("request_mime_type", str_of(pd, "mimeType")),
                truncated: ext.get("request_body_truncated").and_then(Value::as_bool).unwrap_or(false),
            }
        }
        None => Body {
            bytes: Vec::new(),
            mime_type: ext_mime("request_mime_type", ""),
            truncated: ext.get("request_body_truncated").and_then(Value::as_bool).unwrap_or(false),
        },
    };
    let content = &resp["content"];
    let response_body = Body {
        bytes: match content.get("text").and_then(Value::as_str) {
            Some(t) => decode_text(t, content.get("encoding").and_then(Value::as_str), idx)?,
            None => Vec::new(),
        },
        mime_type: ext_mime("response_mime_type", str_of(content, "mimeType")),
        truncated: ext.get("response_body_truncated").and_then(Value::as_bool).unwrap_or(false),
    };

    let source = match ext.get("source").and_then(Value::as_str) {
        Some(s) => Source::parse(s).ok_or_else(|| violation(Some(idx), format!("unknown source {s:?}")))?,
        None => Source::MitmHar,
    };
    let tls = match ext.get("tls") {
        Some(Value::Null) => None,
        Some(t) => Some(
            serde_json::from_value::<TlsInfo>(t.clone()).map_err(|err| violation(Some(idx), format!("bad tls info: {err}")))?,
        ),
        None => (url.scheme == "https").then_some(TlsInfo {
            decrypted: true,
            sni: None,
            version: None,
        }),
    };
    let status = resp.get("status").and_then(Value::as_i64).unwrap_or(0);
    Ok(HttpTransaction {
        id: ext
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("tx-{:05}", idx + 1)),
        started_at,
        duration_ms: e.get("time").and_then(Value::as_f64).unwrap_or(0.0),
        method: str_of(req, "method").to_string(),
        url,
        http_version: str_of(req, "httpVersion").to_string(),
        request_headers: read_pairs(req.get("headers")).into_iter().map(|(n, v)| Header::new(n, v)).collect(),
        response_headers: read_pairs(resp.get("headers")).into_iter().map(|(n, v)| Header::new(n, v)).collect(),
        cookies: read_pairs(req.get("cookies"))
            .into_iter()
            .map(|(name, value)| Cookie { name, value })
            .collect(),
        request_body,
        response_body,
        status: u16::try_from(status).unwrap_or(0),
        status_text: str_of(resp, "statusText").to_string(),
        server_ip: e.get("serverIPAddress").and_then(Value::as_str).and_then(none_if_empty),
        server_port: ext.get("server_port").and_then(Value::as_u64).and_then(|p| u16::try_from(p).ok()),
        tls,
        source,
    })
}

/// Validates a HAR document against the bundled HAR 1.2 schema.
pub fn validate_har(doc: &Value) -> Result<(), HarError> {
    schema::validate(SchemaKind::Har, doc).map_err(|issues| {
        let first = &issues[0];
        violation(entry_index_of(&first.path), first.to_string())
    })
}

/// Parses and validates a HAR document into a traffic log.
pub fn import_har(text: &str) -> Result<TrafficLog, HarError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| HarError::Json(e.to_string()))?;
    import_har_value(&doc)
}

pub fn import_har_value(doc: &Value) -> Result<TrafficLog, HarError> {
    validate_har(doc)?;
    let log = &doc["log"];
    let entries = log["entries"].as_array().cloned().unwrap_or_default();
    let base_time_ms = match log.get(EXT).and_then(|x| x.get("base_time_ms")).and_then(Value::as_i64) {
        Some(b) => b,
        None => {
            let mut min = None;
            for (i, e) in entries.iter().enumerate() {
                let t = parse_time(str_of(e, "startedDateTime"))
                    .ok_or_else(|| violation(Some(i), "startedDateTime is not an ISO 8601 date-time"))?;
                min = Some(min.map_or(t, |m: i64| m.min(t)));
            }
            min.unwrap_or(0)
        }
    };
    let transactions = entries
        .iter()
        .enumerate()
        .map(|(i, e)| import_entry(e, i, base_time_ms))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrafficLog {
        base_time_ms,
        transactions,
        ..Default::default()
    })
}

/// Drops `_privlens` extension data, producing what a third-party tool
/// would have written.
pub fn strip_extensions(doc: &mut Value) {
    match doc {
        Value::Object(map) => {
            map.remove(EXT);
            for v in map.values_mut() {
                strip_extensions(v);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(strip_extensions),
        _ => {}
    }
}
