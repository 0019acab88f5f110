//! Declarative extraction rules for known tracking endpoints.

use serde::{Deserialize, Serialize};

use super::{components, Component, Detector, Location, SensitiveFinding};
use crate::capture::model::HttpTransaction;
use crate::data::{self, DataError};
use crate::decoder::{self, DecodedNode, DecoderLimits, Encoding, NodeValue};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointMatch {
    pub host_suffix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

impl EndpointMatch {
    pub fn matches(&self, tx: &HttpTransaction) -> bool {
        let host = tx.url.host.to_ascii_lowercase();
        let suffix = self.host_suffix.to_ascii_lowercase();
        let host_ok = host == suffix || host.ends_with(&format!(".{suffix}"));
        host_ok
            && self.path_prefix.as_ref().is_none_or(|p| tx.url.path.starts_with(p.as_str()))
            && self.method.as_ref().is_none_or(|m| m.eq_ignore_ascii_case(&tx.method))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleSource {
    Body,
    Query,
    Header,
    Cookie,
}

impl RuleSource {
    fn location(self) -> Location {
        match self {
            RuleSource::Body => Location::RequestBody,
            RuleSource::Query => Location::QueryParam,
            RuleSource::Header => Location::Header,
            RuleSource::Cookie => Location::Cookie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub source: RuleSource,
    pub path: String,
    pub property: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adapter {
    pub adapter_id: String,
    pub endpoint_match: EndpointMatch,
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRegistry {
    pub schema_version: String,
    pub version: String,
    pub adapters: Vec<Adapter>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdapterPathError {
    #[error("invalid path expression {0:?}")]
    Syntax(String),
    #[error("path {0} not present")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Key(String),
    Index(usize),
}

/// Parses `$.a.b[0]["c d"]`.
pub fn parse_path(expr: &str) -> Result<Vec<Segment>, AdapterPathError> {
    let err = || AdapterPathError::Syntax(expr.to_string());
    let rest = expr.strip_prefix('$').ok_or_else(err)?;
    let bytes = rest.as_bytes();
    let mut segs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'.' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j] != b'.' && bytes[j] != b'[' {
                    j += 1;
                }
                if j == start {
                    return Err(err());
                }
                segs.push(Segment::Key(rest[start..j].to_string()));
                i = j;
            }
            b'[' => {
                let close = rest[i..].find(']').ok_or_else(err)? + i;
                let inner = &rest[i + 1..close];
                if inner.starts_with('"') {
                    // quoted keys may contain ']'; parse as a JSON string
                    let mut de = serde_json::Deserializer::from_str(&rest[i + 1..]).into_iter::<String>();
                    let key = de.next().ok_or_else(err)?.map_err(|_| err())?;
                    let end = i + 1 + de.byte_offset();
                    if bytes.get(end) != Some(&b']') {
                        return Err(err());
                    }
                    segs.push(Segment::Key(key));
                    i = end + 1;
                } else {
                    segs.push(Segment::Index(inner.parse().map_err(|_| err())?));
                    i = close + 1;
                }
            }
            _ => return Err(err()),
        }
    }
    Ok(segs)
}

impl AdapterRegistry {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let what = "adapter registry";
        let reg: AdapterRegistry = serde_json::from_str(text).map_err(|e| DataError::Parse {
            what,
            message: e.to_string(),
        })?;
        data::check_major(&reg.schema_version, what)?;
        for a in &reg.adapters {
            let invalid = |message: String| DataError::Invalid { what, message };
            if a.endpoint_match.host_suffix.trim().is_empty() {
                return Err(invalid(format!("{}: empty host_suffix", a.adapter_id)));
            }
            for r in &a.rules {
                let segs = parse_path(&r.path).map_err(|e| invalid(format!("{}: {e}", a.adapter_id)))?;
                if r.source != RuleSource::Body && !matches!(segs.first(), Some(Segment::Key(_))) {
                    return Err(invalid(format!("{}: {} rule must name a field", a.adapter_id, r.path)));
                }
            }
        }
        Ok(reg)
    }

    pub fn bundled() -> Self {
        Self::from_json(data::ADAPTERS_JSON).expect("bundled adapter registry is valid")
    }

    pub fn empty() -> Self {
        AdapterRegistry {
            schema_version: "1.0".into(),
            version: String::new(),
            adapters: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMiss {
    pub transaction_id: String,
    pub adapter_id: String,
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AdapterOutcome {
    pub findings: Vec<SensitiveFinding>,
    pub misses: Vec<RuleMiss>,
}

fn unwrap_inner<'a>(mut node: &'a DecodedNode, chain: &mut Vec<Encoding>) -> &'a DecodedNode {
    loop {
        if node.encoding_applied != Encoding::None {
            chain.push(node.encoding_applied);
        }
        match &node.value {
            NodeValue::Inner(c) => node = c,
            _ => return node,
        }
    }
}

/// Follows `segs` from `root`, transparently through unary layers.
fn resolve<'a>(root: &'a DecodedNode, segs: &[Segment]) -> Option<(&'a DecodedNode, Vec<Encoding>)> {
    let mut chain = Vec::new();
    let mut node = unwrap_inner(root, &mut chain);
    for seg in segs {
        let next = match (seg, &node.value) {
            (Segment::Key(k), NodeValue::Map(entries)) => entries.iter().find(|(name, _)| name == k).map(|(_, c)| c)?,
            (Segment::Index(i), NodeValue::List(items)) => items.get(*i)?,
            _ => return None,
        };
        node = unwrap_inner(next, &mut chain);
    }
    Some((node, chain))
}

fn node_text(node: &DecodedNode) -> String {
    match &node.value {
        NodeValue::Text(t) | NodeValue::Number(t) => t.clone(),
        NodeValue::Boolean(b) => b.to_string(),
        NodeValue::Null => "null".into(),
        _ => String::from_utf8_lossy(&node.raw).into_owned(),
    }
}

fn path_string(segs: &[Segment]) -> String {
    let mut p = String::from("$");
    for s in segs {
        match s {
            Segment::Key(k) => decoder::push_key(&mut p, k),
            Segment::Index(i) => p.push_str(&format!("[{i}]")),
        }
    }
    p
}

pub(super) fn apply_to_components(tx: &HttpTransaction, comps: &[Component], registry: &AdapterRegistry) -> AdapterOutcome {
    let mut out = AdapterOutcome::default();
    for adapter in registry.adapters.iter().filter(|a| a.endpoint_match.matches(tx)) {
        for rule in &adapter.rules {
            let mut miss = |reason: String| {
                log::debug!("adapter {} rule {} missed on {}: {reason}", adapter.adapter_id, rule.path, tx.id);
                out.misses.push(RuleMiss {
                    transaction_id: tx.id.clone(),
                    adapter_id: adapter.adapter_id.clone(),
                    path: rule.path.clone(),
                    reason,
                });
            };
            let segs = match parse_path(&rule.path) {
                Ok(s) => s,
                Err(e) => {
                    miss(e.to_string());
                    continue;
                }
            };
            let location = rule.source.location();
            let (comp, rest) = if rule.source == RuleSource::Body {
                (comps.iter().find(|c| c.location == location), &segs[..])
            } else {
                match segs.split_first() {
                    Some((Segment::Key(name), rest)) => (
                        comps.iter().find(|c| {
                            c.location == location
                                && c.name.as_deref().is_some_and(|n| {
                                    if location == Location::Header {
                                        n.eq_ignore_ascii_case(name)
                                    } else {
                                        n == name
                                    }
                                })
                        }),
                        rest,
                    ),
                    _ => (None, &segs[..]),
                }
            };
            let resolved = comp.and_then(|c| resolve(&c.decoded.root, rest).map(|r| (c, r)));
            match resolved {
                Some((comp, (node, chain))) => out.findings.push(SensitiveFinding {
                    transaction_id: tx.id.clone(),
                    location,
                    path: comp.full_path(&path_string(rest)),
                    label: rule.property.clone(),
                    matched_text: node_text(node),
                    encoding_chain: decoder::display_chain(&chain),
                    detector: Detector::Adapter,
                    adapter_id: Some(adapter.adapter_id.clone()),
                    transform_chain: Vec::new(),
                    category: Some(rule.category.clone()),
                }),
                None => miss(AdapterPathError::Missing(rule.path.clone()).to_string()),
            }
        }
    }
    out
}

/// Runs every adapter whose endpoint matches `tx`. Rules that do not resolve
/// are logged and reported as misses.
pub fn apply_adapters(tx: &HttpTransaction, registry: &AdapterRegistry, limits: &DecoderLimits) -> AdapterOutcome {
    apply_to_components(tx, &components(tx, limits), registry)
}
