//! HTTP/1.x message parsing over reassembled (or decrypted) byte streams.

use super::model::{header_value, Body, Header};
use super::reassembly::DirectionBytes;

/// Default body cap; larger bodies are cut and flagged as truncated.
pub const MAX_BODY_BYTES: usize = 10 * 1024 * 1024;
const MAX_HEAD_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("stream is not HTTP/1.x")]
    NotHttp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub target: String,
    pub version: String,
    pub headers: Vec<Header>,
    pub body: Body,
    pub start_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub version: String,
    pub status: u16,
    pub reason: String,
    pub headers: Vec<Header>,
    pub body: Body,
    pub end_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub request: Request,
    pub response: Option<Response>,
    /// Capture-relative ms of the first request byte.
    pub started_at: i64,
    /// Capture-relative ms of the last response byte, when present.
    pub finished_at: Option<i64>,
}

struct Head {
    start_line: String,
    headers: Vec<Header>,
    len: usize,
}

fn find_head_end(data: &[u8]) -> Option<usize> {
    data.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4).or_else(|| {
        // tolerate bare LF line endings
        data.windows(2).position(|w| w == b"\n\n").map(|p| p + 2)
    })
}

fn parse_head(data: &[u8]) -> Option<Head> {
    let window = &data[..data.len().min(MAX_HEAD_BYTES)];
    let end = find_head_end(window)?;
    let text = String::from_utf8_lossy(&data[..end]);
    let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    let start_line = lines.next()?.to_string();
    let mut headers: Vec<Header> = Vec::new();
    for line in lines {
        if line.is_empty() {
            break;
        }
        if line.starts_with([' ', '\t']) {
            if let Some(last) = headers.last_mut() {
                last.value.push(' ');
                last.value.push_str(line.trim());
            }
            continue;
        }
        let (name, value) = line.split_once(':')?;
        headers.push(Header::new(name.trim(), value.trim()));
    }
    Some(Head {
        start_line,
        headers,
        len: end,
    })
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&b))
}

fn is_http_version(s: &str) -> bool {
    matches!(s, "HTTP/1.0" | "HTTP/1.1")
}

fn parse_request_line(line: &str) -> Option<(String, String, String)> {
    let mut parts = line.split(' ');
    let (m, t, v) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || !is_token(m) || t.is_empty() || !is_http_version(v) {
        return None;
    }
    Some((m.to_string(), t.to_string(), v.to_string()))
}

fn parse_status_line(line: &str) -> Option<(String, u16, String)> {
    let (version, rest) = line.split_once(' ')?;
    if !is_http_version(version) {
        return None;
    }
    let (code, reason) = rest.split_once(' ').unwrap_or((rest, ""));
    if code.len() != 3 {
        return None;
    }
    Some((version.to_string(), code.parse().ok()?, reason.to_string()))
}

enum Framing {
    None,
    Length(usize),
    Chunked,
    UntilClose,
}

/// Result of reading one body: bytes, bytes consumed from the stream, truncation.
struct BodyRead {
    bytes: Vec<u8>,
    consumed: usize,
    truncated: bool,
}

fn capped(mut bytes: Vec<u8>, truncated: bool, cap: usize) -> (Vec<u8>, bool) {
    if bytes.len() > cap {
        bytes.truncate(cap);
        (bytes, true)
    } else {
        (bytes, truncated)
    }
}

fn read_body(data: &[u8], framing: Framing, cap: usize) -> BodyRead {
    match framing {
        Framing::None => BodyRead {
            bytes: Vec::new(),
            consumed: 0,
            truncated: false,
        },
        Framing::Length(n) => {
            let avail = n.min(data.len());
            let (bytes, truncated) = capped(data[..avail].to_vec(), avail < n, cap);
            BodyRead {
                bytes,
                consumed: avail,
                truncated,
            }
        }
        Framing::UntilClose => {
            let (bytes, truncated) = capped(data.to_vec(), false, cap);
            BodyRead {
                bytes,
                consumed: data.len(),
                truncated,
            }
        }
        Framing::Chunked => dechunk(data, cap),
    }
}

fn dechunk(data: &[u8], cap: usize) -> BodyRead {
    let mut out = Vec::new();
    let mut pos = 0;
    let incomplete = |out: Vec<u8>, pos: usize| {
        let (bytes, _) = capped(out, true, cap);
        BodyRead {
            bytes,
            consumed: pos,
            truncated: true,
        }
    };
    loop {
        let Some(line_end) = data[pos..].windows(2).position(|w| w == b"\r\n") else {
            return incomplete(out, data.len());
        };
        let line = String::from_utf8_lossy(&data[pos..pos + line_end]);
        let size_text = line.split(';').next().unwrap_or("").trim();
        let Ok(size) = usize::from_str_radix(size_text, 16) else {
            return incomplete(out, data.len());
        };
        pos += line_end + 2;
        if size == 0 {
            // trailers up to an empty line
            loop {
                match data[pos..].windows(2).position(|w| w == b"\r\n") {
                    Some(0) => {
                        pos += 2;
                        let (bytes, truncated) = capped(out, false, cap);
                        return BodyRead {
                            bytes,
                            consumed: pos,
                            truncated,
                        };
                    }
                    Some(n) => pos += n + 2,
                    None => {
                        let (bytes, truncated) = capped(out, false, cap);
                        return BodyRead {
                            bytes,
                            consumed: data.len(),
                            truncated,
                        };
                    }
                }
            }
        }
        if pos + size > data.len() {
            out.extend_from_slice(&data[pos..]);
            return incomplete(out, data.len());
        }
        if out.len() <= cap {
            out.extend_from_slice(&data[pos..pos + size]);
        }
        pos += size;
        if data.get(pos..pos + 2) == Some(b"\r\n") {
            pos += 2;
        }
    }
}

fn framing_for(headers: &[Header], request: bool) -> Framing {
    if let Some(te) = header_value(headers, "transfer-encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return Framing::Chunked;
        }
    }
    if let Some(cl) = header_value(headers, "content-length") {
        if let Ok(n) = cl.trim().parse::<usize>() {
            return Framing::Length(n);
        }
    }
    if request {
        Framing::None
    } else {
        Framing::UntilClose
    }
}

fn body_with_type(read: BodyRead, headers: &[Header]) -> Body {
    Body {
        bytes: read.bytes,
        mime_type: header_value(headers, "content-type").map(str::to_string),
        truncated: read.truncated,
    }
}

/// Parses a client/server byte stream pair into request/response exchanges.
/// Pipelined requests pair with responses in order. Returns `NotHttp` when
/// the client stream does not start with a request line.
pub fn parse_http(client: &DirectionBytes, server: &DirectionBytes) -> Result<Vec<Exchange>, HttpError> {
    parse_http_with_limit(client, server, MAX_BODY_BYTES)
}

/// `parse_http` with an explicit per-body byte cap.
pub fn parse_http_with_limit(
    client: &DirectionBytes,
    server: &DirectionBytes,
    max_body: usize,
) -> Result<Vec<Exchange>, HttpError> {
    let mut requests = Vec::new();
    let mut pos = 0;
    while pos < client.data.len() {
        let Some(head) = parse_head(&client.data[pos..]) else {
            if requests.is_empty() {
                return Err(HttpError::NotHttp);
            }
            break;
        };
        let Some((method, target, version)) = parse_request_line(&head.start_line) else {
            if requests.is_empty() {
                return Err(HttpError::NotHttp);
            }
            break;
        };
        let body_start = pos + head.len;
        let read = read_body(&client.data[body_start..], framing_for(&head.headers, true), max_body);
        let consumed = read.consumed;
        let body = body_with_type(read, &head.headers);
        requests.push(Request {
            method,
            target,
            version,
            headers: head.headers,
            body,
            start_offset: pos,
        });
        pos = body_start + consumed;
    }
    if requests.is_empty() {
        return Err(HttpError::NotHttp);
    }

    let mut responses: Vec<Option<Response>> = Vec::new();
    let mut spos = 0;
    let mut upgraded = false;
    for req in &requests {
        let mut found = None;
        while !upgraded && spos < server.data.len() {
            let Some(head) = parse_head(&server.data[spos..]) else { break };
            let Some((version, status, reason)) = parse_status_line(&head.start_line) else { break };
            let body_start = spos + head.len;
            if (100..200).contains(&status) && status != 101 {
                spos = body_start;
                continue;
            }
            let framing = if req.method.eq_ignore_ascii_case("HEAD") || matches!(status, 101 | 204 | 304) {
                Framing::None
            } else {
                framing_for(&head.headers, false)
            };
            let read = read_body(&server.data[body_start..], framing, max_body);
            spos = body_start + read.consumed;
            upgraded = status == 101;
            let body = body_with_type(read, &head.headers);
            found = Some(Response {
                version,
                status,
                reason,
                headers: head.headers,
                body,
                end_offset: spos,
            });
            break;
        }
        responses.push(found);
    }

    Ok(requests
        .into_iter()
        .zip(responses)
        .map(|(request, response)| {
            let started_at = client.time_at(request.start_offset).unwrap_or(0);
            let finished_at = response
                .as_ref()
                .and_then(|r| server.time_at(r.end_offset.saturating_sub(1)));
            Exchange {
                request,
                response,
                started_at,
                finished_at,
            }
        })
        .collect())
}
