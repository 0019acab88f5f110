//! Detection of known device values in decoded traffic.

pub mod adapters;

use std::collections::HashSet;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::capture::model::{encode_component, HttpTransaction};
use crate::decoder::{self, Context, Decoded, DecodedNode, DecoderLimits, Encoding};
use crate::schema::{self, SchemaKind};

pub use adapters::{apply_adapters, Adapter, AdapterRegistry, AdapterOutcome, RuleMiss};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraValue {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    #[serde(default = "default_version")]
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advertising_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manufacturer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chip_architecture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os_version: Option<String>,
    #[serde(default)]
    pub extra: Vec<ExtraValue>,
}

fn default_version() -> String {
    "1.0".into()
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("device profile has no values")]
    EmptyProfile,
    #[error("invalid device profile: {0}")]
    Invalid(String),
}

impl DeviceProfile {
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ProfileError::Invalid(e.to_string()))?;
        schema::validate(SchemaKind::Profile, &value).map_err(|issues| {
            ProfileError::Invalid(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))
        })?;
        serde_json::from_value(value).map_err(|e| ProfileError::Invalid(e.to_string()))
    }

    /// (label, value) for every present field.
    pub fn values(&self) -> Vec<(String, String)> {
        let fixed = [
            ("advertising_id", &self.advertising_id),
            ("model", &self.model),
            ("manufacturer", &self.manufacturer),
            ("chip_architecture", &self.chip_architecture),
            ("os_version", &self.os_version),
        ];
        let mut out: Vec<(String, String)> = fixed
            .iter()
            .filter_map(|(label, v)| v.as_ref().filter(|v| !v.is_empty()).map(|v| (label.to_string(), v.clone())))
            .collect();
        out.extend(
            self.extra
                .iter()
                .filter(|e| !e.value.is_empty())
                .map(|e| (e.name.clone(), e.value.clone())),
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    CaseFold,
    StripHyphens,
    UrlEncode,
}

#[derive(Debug, Clone)]
pub struct Pattern {
    pub label: String,
    /// The transformed literal before escaping.
    pub literal: String,
    pub regex: Regex,
    pub transform_chain: Vec<Transform>,
}

#[derive(Debug, Clone, Default)]
pub struct PatternSet {
    pub patterns: Vec<Pattern>,
}

/// Values shorter than this only match between non-alphanumeric boundaries,
/// so "13" does not hit inside "1337".
const BOUNDED_BELOW: usize = 8;

fn build_regex(literal: &str, fold: bool, bounded: bool) -> Regex {
    let escaped = regex::escape(literal);
    let body = if bounded {
        format!("(?:^|[^A-Za-z0-9])({escaped})(?:$|[^A-Za-z0-9])")
    } else {
        format!("({escaped})")
    };
    let src = if fold { format!("(?i){body}") } else { body };
    Regex::new(&src).expect("escaped literal compiles")
}

pub fn compile_patterns(profile: &DeviceProfile) -> Result<PatternSet, ProfileError> {
    let values = profile.values();
    if values.is_empty() {
        return Err(ProfileError::EmptyProfile);
    }
    let mut patterns = Vec::new();
    for (label, value) in values {
        let mut seen: HashSet<(String, bool)> = HashSet::new();
        let has_case = value.to_lowercase() != value.to_uppercase();
        for fold in [false, true] {
            if fold && !has_case {
                continue;
            }
            for (strip, url) in [(false, false), (true, false), (false, true), (true, true)] {
                let mut literal = value.clone();
                let mut chain = Vec::new();
                if strip {
                    literal = literal.replace('-', "");
                    chain.push(Transform::StripHyphens);
                }
                if url {
                    literal = encode_component(&literal);
                    chain.push(Transform::UrlEncode);
                }
                if fold {
                    chain.push(Transform::CaseFold);
                }
                if literal.is_empty() || !seen.insert((literal.clone(), fold)) {
                    continue;
                }
                let bounded = value.chars().count() < BOUNDED_BELOW;
                patterns.push(Pattern {
                    regex: build_regex(&literal, fold, bounded),
                    label: label.clone(),
                    literal,
                    transform_chain: chain,
                });
            }
        }
    }
    Ok(PatternSet { patterns })
}

impl Pattern {
    /// First match in `text`, without the boundary characters.
    pub fn find<'t>(&self, text: &'t str) -> Option<&'t str> {
        self.regex.captures(text).and_then(|c| c.get(1)).map(|m| m.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Header,
    Cookie,
    QueryParam,
    RequestBody,
    ResponseBody,
}

impl Location {
    pub fn as_str(self) -> &'static str {
        match self {
            Location::Header => "header",
            Location::Cookie => "cookie",
            Location::QueryParam => "query_param",
            Location::RequestBody => "request_body",
            Location::ResponseBody => "response_body",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Pattern,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveFinding {
    pub transaction_id: String,
    pub location: Location,
    pub path: String,
    pub label: String,
    pub matched_text: String,
    pub encoding_chain: Vec<Encoding>,
    pub detector: Detector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transform_chain: Vec<Transform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl SensitiveFinding {
    /// Data the app received rather than sent.
    pub fn is_received(&self) -> bool {
        self.location == Location::ResponseBody
    }
}

/// One decoded request component. `root_path` is `$` for bodies and
/// `$.<name>` for named values.
#[derive(Debug, Clone)]
pub struct Component {
    pub location: Location,
    pub name: Option<String>,
    pub root_path: String,
    pub decoded: Decoded,
}

impl Component {
    fn named(location: Location, name: &str, raw: &[u8], limits: &DecoderLimits, ctx: Context) -> Self {
        let mut root_path = String::from("$");
        decoder::push_key(&mut root_path, name);
        Component {
            location,
            name: Some(name.to_string()),
            root_path,
            decoded: decoder::decode_in(raw, limits, ctx),
        }
    }

    /// Full path of a node given its path relative to the component root.
    pub fn full_path(&self, inner: &str) -> String {
        format!("{}{}", self.root_path, inner.strip_prefix('$').unwrap_or(inner))
    }
}

/// Splits a transaction into the components that are scanned. The `Cookie`
/// header is left to the cookie list so each cookie is seen once.
pub fn components(tx: &HttpTransaction, limits: &DecoderLimits) -> Vec<Component> {
    let mut out = Vec::new();
    for h in &tx.request_headers {
        if h.name.eq_ignore_ascii_case("cookie") {
            continue;
        }
        out.push(Component::named(Location::Header, &h.name, h.value.as_bytes(), limits, Context::Plain));
    }
    for c in &tx.cookies {
        out.push(Component::named(Location::Cookie, &c.name, c.value.as_bytes(), limits, Context::Plain));
    }
    if let Some(q) = &tx.url.query {
        for pair in q.split('&').filter(|p| !p.is_empty()) {
            let (name, value) = pair.split_once('=').unwrap_or((pair, ""));
            let name = crate::capture::model::decode_component(name);
            out.push(Component::named(Location::QueryParam, &name, value.as_bytes(), limits, Context::FormValue));
        }
    }
    for (loc, body) in [
        (Location::RequestBody, &tx.request_body),
        (Location::ResponseBody, &tx.response_body),
    ] {
        if !body.bytes.is_empty() {
            out.push(Component {
                location: loc,
                name: None,
                root_path: "$".into(),
                decoded: decoder::decode(&body.bytes, limits),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScanOutcome {
    pub findings: Vec<SensitiveFinding>,
    /// Some component hit the decoder output limit.
    pub output_limit_exceeded: bool,
}

/// Leaves carrying text that patterns are run against.
fn leaf_text(node: &DecodedNode) -> Option<&str> {
    if node.children().is_empty() {
        node.scalar_text()
    } else {
        None
    }
}

pub fn scan_components(tx_id: &str, comps: &[Component], patterns: &PatternSet) -> ScanOutcome {
    let mut outcome = ScanOutcome::default();
    for comp in comps {
        outcome.output_limit_exceeded |= comp.decoded.output_limit_exceeded;
        comp.decoded.root.walk(&mut |node, path, chain| {
            let Some(text) = leaf_text(node) else { return };
            for p in &patterns.patterns {
                if let Some(m) = p.find(text) {
                    outcome.findings.push(SensitiveFinding {
                        transaction_id: tx_id.to_string(),
                        location: comp.location,
                        path: comp.full_path(path),
                        label: p.label.clone(),
                        matched_text: m.to_string(),
                        encoding_chain: decoder::display_chain(chain),
                        detector: Detector::Pattern,
                        adapter_id: None,
                        transform_chain: p.transform_chain.clone(),
                        category: None,
                    });
                }
            }
        });
    }
    outcome.findings = dedup(outcome.findings);
    outcome
}

pub fn scan_transaction(tx: &HttpTransaction, patterns: &PatternSet, limits: &DecoderLimits) -> ScanOutcome {
    scan_components(&tx.id, &components(tx, limits), patterns)
}

/// Keeps the first finding per (transaction, location, path, label).
pub fn dedup(findings: Vec<SensitiveFinding>) -> Vec<SensitiveFinding> {
    let mut seen = HashSet::new();
    findings
        .into_iter()
        .filter(|f| seen.insert((f.transaction_id.clone(), f.location, f.path.clone(), f.label.clone())))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TransactionFindings {
    pub findings: Vec<SensitiveFinding>,
    pub output_limit_exceeded: bool,
    pub rule_misses: Vec<RuleMiss>,
}

/// Pattern scan and adapters over one transaction, deduplicated.
pub fn analyze_transaction(
    tx: &HttpTransaction,
    patterns: Option<&PatternSet>,
    registry: &AdapterRegistry,
    limits: &DecoderLimits,
) -> TransactionFindings {
    let comps = components(tx, limits);
    let mut out = TransactionFindings::default();
    if let Some(p) = patterns {
        let scan = scan_components(&tx.id, &comps, p);
        out.output_limit_exceeded = scan.output_limit_exceeded;
        out.findings = scan.findings;
    } else {
        out.output_limit_exceeded = comps.iter().any(|c| c.decoded.output_limit_exceeded);
    }
    let adapted = adapters::apply_to_components(tx, &comps, registry);
    out.findings.extend(adapted.findings);
    out.findings = dedup(out.findings);
    out.rule_misses = adapted.misses;
    out
}
