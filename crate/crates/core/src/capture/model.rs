//! Normalized HTTP transaction model shared by the pcap and HAR paths.

use std::net::IpAddr;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};

use super::reassembly::FiveTuple;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub name: String,
    pub value: String,
}

impl Header {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Header {
            name: name.into(),
            value: value.into(),
        }
    }
}

/// First value of a header, compared case-insensitively.
pub fn header_value<'a>(headers: &'a [Header], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case(name))
        .map(|h| h.value.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cookie {
    pub name: String,
    pub value: String,
}

/// Splits a `Cookie` request header into name/value pairs.
pub fn parse_cookie_header(value: &str) -> Vec<Cookie> {
    value
        .split(';')
        .filter_map(|part| {
            let part = part.trim();
            if part.is_empty() {
                return None;
            }
            let (name, value) = part.split_once('=').unwrap_or((part, ""));
            Some(Cookie {
                name: name.trim().to_string(),
                value: value.trim().to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryParam {
    pub name: String,
    pub value: String,
}

/// Percent-decodes a query component, treating `+` as a space.
pub fn decode_component(s: &str) -> String {
    let spaced = s.replace('+', " ");
    percent_decode_str(&spaced).decode_utf8_lossy().into_owned()
}

const COMPONENT: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'&')
    .add(b'+')
    .add(b'=')
    .add(b'?')
    .add(b'<')
    .add(b'>')
    .add(b'`')
    .add(b'{')
    .add(b'}');

pub fn encode_component(s: &str) -> String {
    utf8_percent_encode(s, COMPONENT).to_string()
}

/// Parses `a=1&b=2` style text into decoded pairs.
pub fn parse_query(query: &str) -> Vec<QueryParam> {
    query
        .split('&')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (n, v) = pair.split_once('=').unwrap_or((pair, ""));
            QueryParam {
                name: decode_component(n),
                value: decode_component(v),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Url {
    pub scheme: String,
    pub host: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    pub path: String,
    /// Raw query string without the leading `?`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl Url {
    /// Parses an absolute `http(s)://` URL. Fragments are dropped.
    pub fn parse(text: &str) -> Option<Url> {
        let (scheme, rest) = text.split_once("://")?;
        let scheme = scheme.to_ascii_lowercase();
        if scheme.is_empty() || !scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c)) {
            return None;
        }
        let rest = rest.split('#').next().unwrap_or("");
        let auth_end = rest.find(['/', '?']).unwrap_or(rest.len());
        let authority = &rest[..auth_end];
        let authority = authority.rsplit('@').next().unwrap_or(authority);
        let (host, port) = split_host_port(authority)?;
        if host.is_empty() {
            return None;
        }
        let tail = &rest[auth_end..];
        let (path, query) = match tail.split_once('?') {
            Some((p, q)) => (p, Some(q.to_string())),
            None => (tail, None),
        };
        let default = default_port(&scheme);
        Some(Url {
            scheme,
            host: host.to_ascii_lowercase(),
            port: port.filter(|p| Some(*p) != default),
            path: if path.is_empty() { "/".to_string() } else { path.to_string() },
            query,
        })
    }

    /// Builds a URL from an origin-form request target.
    pub fn from_target(scheme: &str, host: &str, port: Option<u16>, target: &str) -> Url {
        let (path, query) = match target.split_once('?') {
            Some((p, q)) => (p, Some(q.to_string())),
            None => (target, None),
        };
        Url {
            scheme: scheme.to_string(),
            host: host.to_ascii_lowercase(),
            port: port.filter(|p| Some(*p) != default_port(scheme)),
            path: if path.is_empty() { "/".to_string() } else { path.to_string() },
            query,
        }
    }

    pub fn params(&self) -> Vec<QueryParam> {
        self.query.as_deref().map(parse_query).unwrap_or_default()
    }

    pub fn effective_port(&self) -> Option<u16> {
        self.port.or_else(|| default_port(&self.scheme))
    }
}

impl std::fmt::Display for Url {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let host = if self.host.contains(':') && !self.host.starts_with('[') {
            format!("[{}]", self.host)
        } else {
            self.host.clone()
        };
        write!(f, "{}://{}", self.scheme, host)?;
        if let Some(p) = self.port {
            write!(f, ":{p}")?;
        }
        f.write_str(&self.path)?;
        if let Some(q) = &self.query {
            write!(f, "?{q}")?;
        }
        Ok(())
    }
}

fn default_port(scheme: &str) -> Option<u16> {
    match scheme {
        "http" | "ws" => Some(80),
        "https" | "wss" => Some(443),
        _ => None,
    }
}

/// Splits `host[:port]`, handling bracketed IPv6 literals.
pub fn split_host_port(authority: &str) -> Option<(&str, Option<u16>)> {
    if let Some(rest) = authority.strip_prefix('[') {
        let (host, after) = rest.split_once(']')?;
        let port = match after.strip_prefix(':') {
            Some(p) if !p.is_empty() => Some(p.parse().ok()?),
            _ => None,
        };
        return Some((host, port));
    }
    match authority.rsplit_once(':') {
        Some((h, p)) if !h.contains(':') => {
            let port = if p.is_empty() { None } else { Some(p.parse().ok()?) };
            Some((h, port))
        }
        _ => Some((authority, None)),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Body {
    #[serde(with = "base64_bytes")]
    pub bytes: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime_type: Option<String>,
    #[serde(default)]
    pub truncated: bool,
}

impl Body {
    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

mod base64_bytes {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PcapDecrypted,
    MitmHar,
    PcapUndecryptedMeta,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::PcapDecrypted => "pcap_decrypted",
            Source::MitmHar => "mitm_har",
            Source::PcapUndecryptedMeta => "pcap_undecrypted_meta",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        Some(match s {
            "pcap_decrypted" => Source::PcapDecrypted,
            "mitm_har" => Source::MitmHar,
            "pcap_undecrypted_meta" => Source::PcapUndecryptedMeta,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsInfo {
    pub decrypted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sni: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpTransaction {
    pub id: String,
    /// Milliseconds relative to the traffic log base time.
    pub started_at: i64,
    pub duration_ms: f64,
    pub method: String,
    pub url: Url,
    pub http_version: String,
    pub request_headers: Vec<Header>,
    pub response_headers: Vec<Header>,
    pub cookies: Vec<Cookie>,
    pub request_body: Body,
    pub response_body: Body,
    /// 0 when no response was captured.
    pub status: u16,
    pub status_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_port: Option<u16>,
    /// `None` for cleartext HTTP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls: Option<TlsInfo>,
    pub source: Source,
}

impl HttpTransaction {
    /// Placeholder row for a TLS flow whose content could not be read.
    pub fn undecrypted(id: String, meta: &TlsFlowMeta) -> Self {
        let host = meta.sni.clone().unwrap_or_else(|| meta.server_ip.to_string());
        HttpTransaction {
            id,
            started_at: meta.first_seen,
            duration_ms: 0.0,
            method: String::new(),
            url: Url::from_target("https", &host, Some(meta.server_port), "/"),
            http_version: String::new(),
            request_headers: Vec::new(),
            response_headers: Vec::new(),
            cookies: Vec::new(),
            request_body: Body::default(),
            response_body: Body::default(),
            status: 0,
            status_text: String::new(),
            server_ip: Some(meta.server_ip.to_string()),
            server_port: Some(meta.server_port),
            tls: Some(TlsInfo {
                decrypted: false,
                sni: meta.sni.clone(),
                version: meta.tls_version.clone(),
            }),
            source: Source::PcapUndecryptedMeta,
        }
    }

    pub fn host(&self) -> &str {
        &self.url.host
    }
}

/// Handshake-level record of one TLS endpoint, kept whether or not the
/// content was decrypted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsFlowMeta {
    pub server_ip: IpAddr,
    pub server_port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sni: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls_version: Option<String>,
    /// Capture-relative milliseconds.
    pub first_seen: i64,
    pub decrypted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_note: Option<String>,
    /// Number of TCP connections merged into this record.
    pub connections: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowOutcome {
    /// Cleartext HTTP or decrypted TLS carrying HTTP/1.x.
    Http { transactions: usize, decrypted_tls: bool },
    /// TLS that could not be decrypted.
    Undecrypted { reason: String },
    /// Decrypted TLS that does not carry HTTP/1.x (for example h2).
    NonHttpTls { note: String },
    /// Neither HTTP nor TLS.
    Residue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub five_tuple: FiveTuple,
    pub outcome: FlowOutcome,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficLog {
    /// Absolute time of the capture start, Unix epoch milliseconds.
    pub base_time_ms: i64,
    pub transactions: Vec<HttpTransaction>,
    #[serde(default)]
    pub flow_meta: Vec<TlsFlowMeta>,
    #[serde(default)]
    pub flows: Vec<FlowRecord>,
    #[serde(default)]
    pub udp_flows: usize,
}

impl TrafficLog {
    pub fn undecrypted_flows(&self) -> impl Iterator<Item = &TlsFlowMeta> {
        self.flow_meta.iter().filter(|m| !m.decrypted)
    }

    /// Flows that produced no transactions: undecrypted, or decrypted but
    /// carrying something other than HTTP/1.x.
    pub fn metadata_only_flows(&self) -> Vec<&TlsFlowMeta> {
        self.flow_meta
            .iter()
            .filter(|m| !m.decrypted || m.protocol_note.is_some())
            .collect()
    }
}
