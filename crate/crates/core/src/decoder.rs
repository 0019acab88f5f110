//! Recursive reversal of common payload encodings.
//!
//! Layers are tried in a fixed order: gzip, JSON, form, URL percent
//! encoding, base64. String leaves of structured documents are decoded again.
//! Each node keeps the parameters needed to re-encode it (base64 alphabet and
//! padding, the set of escaped bytes for URL encoding) so the tree can be
//! checked against its raw bytes.

use std::io::Read;

use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine;
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    None,
    Url,
    Base64,
    Gzip,
    Json,
    Form,
}

impl Encoding {
    pub fn as_str(self) -> &'static str {
        match self {
            Encoding::None => "none",
            Encoding::Url => "url",
            Encoding::Base64 => "base64",
            Encoding::Gzip => "gzip",
            Encoding::Json => "json",
            Encoding::Form => "form",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLimits {
    pub max_depth: usize,
    pub max_output_bytes: usize,
    pub min_base64_len: usize,
}

impl Default for DecoderLimits {
    fn default() -> Self {
        DecoderLimits {
            max_depth: 8,
            max_output_bytes: 32 * 1024 * 1024,
            min_base64_len: 16,
        }
    }
}

impl DecoderLimits {
    pub fn is_valid(&self) -> bool {
        self.max_depth > 0 && self.max_output_bytes > 0 && self.min_base64_len > 0
    }
}

/// Parameters that make a layer exactly invertible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerParams {
    Base64 { url_safe: bool, padded: bool },
    Url { escaped: Vec<u8>, plus_space: bool, lower_hex: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeValue {
    Text(String),
    Number(String),
    Boolean(bool),
    Null,
    Bytes(Vec<u8>),
    Map(Vec<(String, DecodedNode)>),
    List(Vec<DecodedNode>),
    /// Result of a unary layer (gzip, base64, url).
    Inner(Box<DecodedNode>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedNode {
    /// Layer that turns `raw` into `value`. Structural children of a JSON
    /// document (nested objects, scalars) carry `None`.
    pub encoding_applied: Encoding,
    pub raw: Vec<u8>,
    pub value: NodeValue,
    pub depth: usize,
    pub params: Option<LayerParams>,
    /// Leaf of at least 64 bytes with entropy above 7.5 bits/byte.
    pub possibly_encrypted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub root: DecodedNode,
    /// The output budget ran out; some nodes were left undecoded.
    pub output_limit_exceeded: bool,
}

/// Where the bytes came from; form values treat `+` as an escaped space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    Plain,
    FormValue,
}

struct Decoder {
    limits: DecoderLimits,
    budget: usize,
    exceeded: bool,
}

pub fn shannon_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn leaf_value(bytes: &[u8]) -> NodeValue {
    match std::str::from_utf8(bytes) {
        Ok(s) => NodeValue::Text(s.to_string()),
        Err(_) => NodeValue::Bytes(bytes.to_vec()),
    }
}

fn is_hex(c: u8) -> bool {
    c.is_ascii_hexdigit()
}

/// Percent-decodes `raw`. Returns the decoded bytes and the parameters that
/// re-encode them exactly, or `None` when nothing changes or the escaping is
/// not consistent enough to be inverted.
fn url_decode(raw: &[u8], plus_space: bool) -> Option<(Vec<u8>, LayerParams)> {
    let mut out = Vec::with_capacity(raw.len());
    let mut escaped = [false; 256];
    let mut any_escape = false;
    let mut lower = None::<bool>;
    let mut i = 0;
    while i < raw.len() {
        let c = raw[i];
        if c == b'%' && i + 2 < raw.len() && is_hex(raw[i + 1]) && is_hex(raw[i + 2]) {
            let hex = &raw[i + 1..i + 3];
            let has_lower = hex.iter().any(|b| b.is_ascii_lowercase());
            let has_upper = hex.iter().any(|b| b.is_ascii_uppercase());
            if has_lower && has_upper {
                return None;
            }
            if has_lower || has_upper {
                match lower {
                    None => lower = Some(has_lower),
                    Some(l) if l != has_lower => return None,
                    _ => {}
                }
            }
            let v = u8::from_str_radix(std::str::from_utf8(hex).ok()?, 16).ok()?;
            escaped[v as usize] = true;
            any_escape = true;
            out.push(v);
            i += 3;
        } else if c == b'+' && plus_space {
            out.push(b' ');
            i += 1;
        } else {
            out.push(c);
            i += 1;
        }
    }
    let plus_used = plus_space && raw.contains(&b'+');
    if !any_escape && !plus_used {
        return None;
    }
    let params = LayerParams::Url {
        escaped: (0..=255u8).filter(|b| escaped[*b as usize]).collect(),
        plus_space: plus_used,
        lower_hex: lower.unwrap_or(false),
    };
    (url_encode(&out, &params) == raw).then_some((out, params))
}

pub fn url_encode(decoded: &[u8], params: &LayerParams) -> Vec<u8> {
    let LayerParams::Url {
        escaped,
        plus_space,
        lower_hex,
    } = params
    else {
        return decoded.to_vec();
    };
    let mut out = Vec::with_capacity(decoded.len() * 3);
    for &c in decoded {
        if c == b' ' && *plus_space && !escaped.contains(&c) {
            out.push(b'+');
        } else if escaped.contains(&c) {
            let s = if *lower_hex { format!("%{c:02x}") } else { format!("%{c:02X}") };
            out.extend_from_slice(s.as_bytes());
        } else {
            out.push(c);
        }
    }
    out
}

fn base64_engine(url_safe: bool, padded: bool) -> &'static base64::engine::GeneralPurpose {
    match (url_safe, padded) {
        (false, true) => &STANDARD,
        (false, false) => &STANDARD_NO_PAD,
        (true, true) => &URL_SAFE,
        (true, false) => &URL_SAFE_NO_PAD,
    }
}

pub fn base64_encode(decoded: &[u8], params: &LayerParams) -> Vec<u8> {
    match params {
        LayerParams::Base64 { url_safe, padded } => base64_engine(*url_safe, *padded).encode(decoded).into_bytes(),
        _ => decoded.to_vec(),
    }
}

/// Strict base64 decode. Hex-only strings are left alone: they are far more
/// often hex identifiers than base64. The length guard is applied by the caller.
fn base64_decode(raw: &[u8]) -> Option<(Vec<u8>, LayerParams)> {
    if raw.len() < 4 || raw.iter().all(|c| is_hex(*c)) {
        return None;
    }
    let body = raw.strip_suffix(b"==").or_else(|| raw.strip_suffix(b"=")).unwrap_or(raw);
    let padded = body.len() != raw.len();
    let std_chars = body.iter().any(|c| *c == b'+' || *c == b'/');
    let url_chars = body.iter().any(|c| *c == b'-' || *c == b'_');
    if std_chars && url_chars {
        return None;
    }
    if !body.iter().all(|c| c.is_ascii_alphanumeric() || b"+/-_".contains(c)) {
        return None;
    }
    let params = LayerParams::Base64 {
        url_safe: url_chars,
        padded,
    };
    let decoded = base64_engine(url_chars, padded).decode(raw).ok()?;
    (base64_encode(&decoded, &params) == raw).then_some((decoded, params))
}

fn gunzip(raw: &[u8], limit: usize) -> Option<(Vec<u8>, bool)> {
    let mut out = Vec::new();
    let mut reader = GzDecoder::new(raw).take(limit as u64 + 1);
    reader.read_to_end(&mut out).ok()?;
    let over = out.len() > limit;
    out.truncate(limit);
    Some((out, over))
}

fn looks_like_form(text: &str) -> bool {
    if !text.contains('&') {
        return false;
    }
    text.split('&').all(|pair| match pair.split_once('=') {
        Some((name, value)) => {
            !name.is_empty()
                && !name.bytes().any(|b| b.is_ascii_whitespace() || b == b'=' || b.is_ascii_control())
                && !value.bytes().any(|b| b.is_ascii_whitespace() || b.is_ascii_control())
        }
        None => false,
    })
}

fn json_scalar_raw(v: &Value) -> Vec<u8> {
    serde_json::to_vec(v).expect("json value serializes")
}

impl Decoder {
    fn take_budget(&mut self, n: usize) -> bool {
        if n > self.budget {
            self.exceeded = true;
            false
        } else {
            self.budget -= n;
            true
        }
    }

    fn leaf(&self, raw: Vec<u8>, depth: usize) -> DecodedNode {
        let possibly_encrypted = raw.len() >= 64 && shannon_entropy(&raw) > 7.5;
        DecodedNode {
            encoding_applied: Encoding::None,
            value: leaf_value(&raw),
            raw,
            depth,
            params: None,
            possibly_encrypted,
        }
    }

    fn unary(&mut self, raw: Vec<u8>, depth: usize, enc: Encoding, params: Option<LayerParams>, inner: Vec<u8>) -> DecodedNode {
        let child = self.node(inner, depth + 1, Context::Plain);
        DecodedNode {
            encoding_applied: enc,
            raw,
            value: NodeValue::Inner(Box::new(child)),
            depth,
            params,
            possibly_encrypted: false,
        }
    }

    /// Strings of at least `min_base64_len` may decode to any UTF-8 text.
    /// Shorter ones must decode to printable ASCII or to something that
    /// decodes further; random identifiers rarely do either.
    fn base64_acceptable(&self, raw: &[u8], inner: &[u8]) -> bool {
        if self.decodes_further(inner) {
            return true;
        }
        if raw.len() >= self.limits.min_base64_len {
            return std::str::from_utf8(inner).is_ok();
        }
        inner.len() >= 3 && inner.iter().all(|b| (0x20..0x7f).contains(b))
    }

    /// Whether any layer would apply to `bytes` (used by the base64 guard).
    fn decodes_further(&self, bytes: &[u8]) -> bool {
        bytes.starts_with(&[0x1f, 0x8b])
            || matches!(serde_json::from_slice::<Value>(bytes), Ok(Value::Object(_) | Value::Array(_)))
            || std::str::from_utf8(bytes).is_ok_and(looks_like_form)
            || url_decode(bytes, false).is_some()
            || base64_decode(bytes).is_some_and(|(inner, _)| self.base64_acceptable(bytes, &inner))
    }

    fn node(&mut self, raw: Vec<u8>, depth: usize, ctx: Context) -> DecodedNode {
        if depth >= self.limits.max_depth {
            return self.leaf(raw, depth);
        }
        // (1) gzip
        if raw.starts_with(&[0x1f, 0x8b]) {
            if let Some((inner, over)) = gunzip(&raw, self.budget) {
                if over {
                    self.exceeded = true;
                    return self.leaf(raw, depth);
                }
                if self.take_budget(inner.len()) {
                    return self.unary(raw, depth, Encoding::Gzip, None, inner);
                }
                return self.leaf(raw, depth);
            }
        }
        // (2) JSON object or array
        if raw.iter().find(|b| !b.is_ascii_whitespace()).is_some_and(|b| *b == b'{' || *b == b'[') {
            if let Ok(v @ (Value::Object(_) | Value::Array(_))) = serde_json::from_slice::<Value>(&raw) {
                let value = self.json_value(&v, depth);
                return DecodedNode {
                    encoding_applied: Encoding::Json,
                    raw,
                    value,
                    depth,
                    params: None,
                    possibly_encrypted: false,
                };
            }
        }
        // (3) form
        if let Ok(text) = std::str::from_utf8(&raw) {
            if looks_like_form(text) {
                let pairs: Vec<(String, Vec<u8>)> = text
                    .split('&')
                    .map(|p| {
                        let (n, v) = p.split_once('=').expect("checked by looks_like_form");
                        (n.to_string(), v.as_bytes().to_vec())
                    })
                    .collect();
                let entries = pairs
                    .into_iter()
                    .map(|(n, v)| {
                        let child = self.node(v, depth + 1, Context::FormValue);
                        (n, child)
                    })
                    .collect();
                return DecodedNode {
                    encoding_applied: Encoding::Form,
                    raw,
                    value: NodeValue::Map(entries),
                    depth,
                    params: None,
                    possibly_encrypted: false,
                };
            }
        }
        // (4) URL percent-decoding
        if let Some((inner, params)) = url_decode(&raw, ctx == Context::FormValue) {
            if self.take_budget(inner.len()) {
                return self.unary(raw, depth, Encoding::Url, Some(params), inner);
            }
            return self.leaf(raw, depth);
        }
        // (5) base64, only if the result is text or decodes further
        if let Some((inner, params)) = base64_decode(&raw) {
            if self.base64_acceptable(&raw, &inner) {
                if self.take_budget(inner.len()) {
                    return self.unary(raw, depth, Encoding::Base64, Some(params), inner);
                }
                return self.leaf(raw, depth);
            }
        }
        self.leaf(raw, depth)
    }

    /// Structural children of a parsed JSON document.
    fn json_value(&mut self, v: &Value, depth: usize) -> NodeValue {
        match v {
            Value::Object(map) => NodeValue::Map(
                map.iter()
                    .map(|(k, child)| (k.clone(), self.json_child(child, depth + 1)))
                    .collect(),
            ),
            Value::Array(items) => NodeValue::List(items.iter().map(|c| self.json_child(c, depth + 1)).collect()),
            _ => unreachable!("only containers reach json_value"),
        }
    }

    fn json_child(&mut self, v: &Value, depth: usize) -> DecodedNode {
        let structural = |raw: Vec<u8>, value: NodeValue| DecodedNode {
            encoding_applied: Encoding::None,
            raw,
            value,
            depth,
            params: None,
            possibly_encrypted: false,
        };
        match v {
            Value::String(s) => self.node(s.as_bytes().to_vec(), depth, Context::Plain),
            Value::Number(n) => structural(json_scalar_raw(v), NodeValue::Number(n.to_string())),
            Value::Bool(b) => structural(json_scalar_raw(v), NodeValue::Boolean(*b)),
            Value::Null => structural(json_scalar_raw(v), NodeValue::Null),
            Value::Object(_) | Value::Array(_) => {
                let raw = json_scalar_raw(v);
                if depth >= self.limits.max_depth {
                    return self.leaf(raw, depth);
                }
                let value = self.json_value(v, depth);
                structural(raw, value)
            }
        }
    }
}

/// Decodes `bytes` recursively. Never fails: the worst case is a single
/// leaf with `encoding_applied == None`.
pub fn decode(bytes: &[u8], limits: &DecoderLimits) -> Decoded {
    decode_in(bytes, limits, Context::Plain)
}

pub fn decode_in(bytes: &[u8], limits: &DecoderLimits, ctx: Context) -> Decoded {
    let mut d = Decoder {
        limits: *limits,
        budget: limits.max_output_bytes,
        exceeded: false,
    };
    let root = d.node(bytes.to_vec(), 0, ctx);
    Decoded {
        root,
        output_limit_exceeded: d.exceeded,
    }
}

/// Rebuilds the JSON value a structural subtree stands for.
fn rebuild_json(node: &DecodedNode) -> Option<Value> {
    match &node.value {
        NodeValue::Map(entries) => {
            let mut m = serde_json::Map::new();
            for (k, c) in entries {
                m.insert(k.clone(), rebuild_json(c)?);
            }
            Some(Value::Object(m))
        }
        NodeValue::List(items) => items.iter().map(rebuild_json).collect::<Option<Vec<_>>>().map(Value::Array),
        NodeValue::Number(_) | NodeValue::Boolean(_) | NodeValue::Null => serde_json::from_slice(&node.raw).ok(),
        // any string child: the JSON string is the node's raw bytes
        _ => Some(Value::String(String::from_utf8(node.raw.clone()).ok()?)),
    }
}

/// Checks that this node's layer maps `raw` to its value. Base64, URL and
/// form layers are checked by re-encoding the children; gzip and JSON are
/// checked by decoding `raw` again, since their encoders are many-to-one.
pub fn verify_node(node: &DecodedNode) -> bool {
    match (&node.encoding_applied, &node.value) {
        (Encoding::Url, NodeValue::Inner(child)) => node
            .params
            .as_ref()
            .is_some_and(|p| url_encode(&child.raw, p) == node.raw),
        (Encoding::Base64, NodeValue::Inner(child)) => node
            .params
            .as_ref()
            .is_some_and(|p| base64_encode(&child.raw, p) == node.raw),
        (Encoding::Gzip, NodeValue::Inner(child)) => {
            gunzip(&node.raw, usize::MAX / 2).is_some_and(|(bytes, _)| bytes == child.raw)
        }
        (Encoding::Form, NodeValue::Map(entries)) => {
            let joined: Vec<Vec<u8>> = entries
                .iter()
                .map(|(k, c)| {
                    let mut v = k.as_bytes().to_vec();
                    v.push(b'=');
                    v.extend_from_slice(&c.raw);
                    v
                })
                .collect();
            joined.join(&b'&') == node.raw
        }
        (Encoding::Json, NodeValue::Map(_) | NodeValue::List(_))
        | (Encoding::None, NodeValue::Map(_) | NodeValue::List(_)) => {
            serde_json::from_slice::<Value>(&node.raw).ok() == rebuild_json(node)
        }
        (Encoding::None, NodeValue::Text(t)) => t.as_bytes() == node.raw,
        (Encoding::None, NodeValue::Bytes(b)) => *b == node.raw,
        (Encoding::None, NodeValue::Number(_) | NodeValue::Boolean(_) | NodeValue::Null) => {
            serde_json::from_slice::<Value>(&node.raw).is_ok()
        }
        _ => false,
    }
}

impl DecodedNode {
    pub fn children(&self) -> Vec<&DecodedNode> {
        match &self.value {
            NodeValue::Map(e) => e.iter().map(|(_, c)| c).collect(),
            NodeValue::List(items) => items.iter().collect(),
            NodeValue::Inner(c) => vec![c.as_ref()],
            _ => Vec::new(),
        }
    }

    /// Visits every node with its path and the non-`none` layers above and
    /// including it.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a DecodedNode, &str, &[Encoding])) {
        fn go<'a>(
            n: &'a DecodedNode,
            path: &mut String,
            chain: &mut Vec<Encoding>,
            f: &mut dyn FnMut(&'a DecodedNode, &str, &[Encoding]),
        ) {
            let pushed = n.encoding_applied != Encoding::None;
            if pushed {
                chain.push(n.encoding_applied);
            }
            f(n, path, chain);
            match &n.value {
                NodeValue::Map(entries) => {
                    for (k, c) in entries {
                        let len = path.len();
                        push_key(path, k);
                        go(c, path, chain, f);
                        path.truncate(len);
                    }
                }
                NodeValue::List(items) => {
                    for (i, c) in items.iter().enumerate() {
                        let len = path.len();
                        path.push_str(&format!("[{i}]"));
                        go(c, path, chain, f);
                        path.truncate(len);
                    }
                }
                NodeValue::Inner(c) => go(c, path, chain, f),
                _ => {}
            }
            if pushed {
                chain.pop();
            }
        }
        let mut path = String::from("$");
        let mut chain = Vec::new();
        go(self, &mut path, &mut chain, f);
    }

    /// Text form of a scalar leaf, if it is one.
    pub fn scalar_text(&self) -> Option<&str> {
        match &self.value {
            NodeValue::Text(t) | NodeValue::Number(t) => Some(t),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        let raw = match std::str::from_utf8(&self.raw) {
            Ok(s) => Value::String(s.to_string()),
            Err(_) => serde_json::json!({"base64": STANDARD.encode(&self.raw)}),
        };
        let value = match &self.value {
            NodeValue::Text(t) => serde_json::json!({"text": t}),
            NodeValue::Number(n) => serde_json::json!({"number": n}),
            NodeValue::Boolean(b) => serde_json::json!({"boolean": b}),
            NodeValue::Null => serde_json::json!({"null": null}),
            NodeValue::Bytes(b) => serde_json::json!({"bytes": STANDARD.encode(b)}),
            NodeValue::Map(entries) => {
                let mut m = serde_json::Map::new();
                for (k, c) in entries {
                    m.insert(k.clone(), c.to_json());
                }
                serde_json::json!({"map": m})
            }
            NodeValue::List(items) => serde_json::json!({"list": items.iter().map(|c| c.to_json()).collect::<Vec<_>>()}),
            NodeValue::Inner(c) => serde_json::json!({"decoded": c.to_json()}),
        };
        let mut out = serde_json::json!({
            "encoding": self.encoding_applied.as_str(),
            "depth": self.depth,
            "raw": raw,
            "value": value,
        });
        if self.possibly_encrypted {
            out["possibly_encrypted"] = Value::Bool(true);
        }
        out
    }
}

/// Appends a map key to a path, bracket-quoting keys that are not plain identifiers.
pub fn push_key(path: &mut String, key: &str) {
    if !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        path.push('.');
        path.push_str(key);
    } else {
        path.push_str(&format!("[{}]", serde_json::to_string(key).expect("string serializes")));
    }
}

/// Non-`none` layers from the root down to the node at `path`, or `[none]`.
pub fn display_chain(chain: &[Encoding]) -> Vec<Encoding> {
    if chain.is_empty() {
        vec![Encoding::None]
    } else {
        chain.to_vec()
    }
}
