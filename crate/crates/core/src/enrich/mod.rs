//! Endpoint enrichment: registrable domains, owning companies, block list
//! hits, hosting data and per-endpoint aggregates.

pub mod whois;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::capture::model::{HttpTransaction, TlsFlowMeta};
use crate::data::{self, DataError};

pub use whois::{HostingRecord, IpMeta, MockWhoisProvider, Resolver, WhoisProvider};

#[derive(Debug, Clone, Default)]
pub struct PublicSuffixList {
    rules: HashSet<String>,
    wildcards: HashSet<String>,
    exceptions: HashSet<String>,
}

impl PublicSuffixList {
    pub fn parse(text: &str) -> Self {
        let mut psl = PublicSuffixList::default();
        for line in text.lines() {
            let rule = line.split_whitespace().next().unwrap_or("");
            if rule.is_empty() || rule.starts_with("//") {
                continue;
            }
            let rule = rule.to_ascii_lowercase();
            if let Some(r) = rule.strip_prefix('!') {
                psl.exceptions.insert(r.to_string());
            } else if let Some(r) = rule.strip_prefix("*.") {
                psl.wildcards.insert(r.to_string());
            } else {
                psl.rules.insert(rule);
            }
        }
        psl
    }

    pub fn bundled() -> &'static PublicSuffixList {
        static PSL: once_cell::sync::Lazy<PublicSuffixList> =
            once_cell::sync::Lazy::new(|| PublicSuffixList::parse(data::PUBLIC_SUFFIX_LIST));
        &PSL
    }

    /// Number of labels in the public suffix of `host` (default rule `*`).
    fn suffix_labels(&self, labels: &[&str]) -> usize {
        let n = labels.len();
        let mut best = 1;
        for i in 0..n {
            let candidate = labels[i..].join(".");
            let len = n - i;
            if self.exceptions.contains(&candidate) {
                return len - 1;
            }
            if self.rules.contains(&candidate) {
                best = best.max(len);
            }
            if i + 1 < n && self.wildcards.contains(&labels[i + 1..].join(".")) {
                best = best.max(len);
            }
        }
        best
    }

    /// Public suffix plus one label. IP literals and bare suffixes are
    /// returned unchanged.
    pub fn registrable_domain(&self, host: &str) -> String {
        let host = host.trim_end_matches('.').to_ascii_lowercase();
        if host.parse::<IpAddr>().is_ok() || host.trim_matches(|c| c == '[' || c == ']').parse::<IpAddr>().is_ok() {
            return host;
        }
        let labels: Vec<&str> = host.split('.').collect();
        let suffix = self.suffix_labels(&labels);
        if suffix >= labels.len() {
            return host;
        }
        labels[labels.len() - suffix - 1..].join(".")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompanyInfo {
    pub owner_name: String,
    pub display_name: String,
    #[serde(default)]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompanyMatch {
    /// Database key that matched.
    pub domain: String,
    pub name: String,
    pub display_name: String,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompanyDb {
    pub version: String,
    pub entries: BTreeMap<String, CompanyInfo>,
}

#[derive(Deserialize)]
struct CompanyFile {
    schema_version: String,
    version: String,
    domains: BTreeMap<String, CompanyInfo>,
}

impl CompanyDb {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let what = "company database";
        let f: CompanyFile = serde_json::from_str(text).map_err(|e| DataError::Parse {
            what,
            message: e.to_string(),
        })?;
        data::check_major(&f.schema_version, what)?;
        Ok(CompanyDb {
            version: f.version,
            entries: f
                .domains
                .into_iter()
                .map(|(k, v)| (k.trim_end_matches('.').to_ascii_lowercase(), v))
                .collect(),
        })
    }

    pub fn bundled() -> Self {
        Self::from_json(data::COMPANIES_JSON).expect("bundled company database is valid")
    }
}

/// Longest database key that equals `host` or is a label-aligned suffix of it.
pub fn match_company(host: &str, db: &CompanyDb) -> Option<CompanyMatch> {
    let host = host.trim_end_matches('.').to_ascii_lowercase();
    let mut rest = host.as_str();
    loop {
        if let Some(info) = db.entries.get(rest) {
            return Some(CompanyMatch {
                domain: rest.to_string(),
                name: info.owner_name.clone(),
                display_name: info.display_name.clone(),
                categories: info.categories.clone(),
            });
        }
        rest = rest.split_once('.')?.1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterList {
    pub name: String,
    pub version: String,
    /// Domains of `||domain^` rules.
    pub rules: Vec<String>,
    /// Lines that were rules but not domain anchors.
    pub dropped: usize,
}

impl FilterList {
    pub fn parse(name: &str, text: &str) -> Self {
        let mut list = FilterList {
            name: name.to_string(),
            version: String::new(),
            rules: Vec::new(),
            dropped: 0,
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            if let Some(comment) = line.strip_prefix('!') {
                if let Some(v) = comment.trim().strip_prefix("Version:") {
                    list.version = v.trim().to_string();
                }
                continue;
            }
            let domain = line.strip_prefix("||").and_then(|r| r.strip_suffix('^')).filter(|d| {
                !d.is_empty() && d.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-')
            });
            match domain {
                Some(d) => list.rules.push(d.to_ascii_lowercase()),
                None => list.dropped += 1,
            }
        }
        list
    }

    pub fn bundled_example() -> Self {
        Self::parse("example-privacy-list", data::EXAMPLE_BLOCKLIST)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlocklistHit {
    pub list_name: String,
    pub rule: String,
}

fn rule_hits(host: &str, domain: &str) -> bool {
    host == domain || (host.len() > domain.len() && host.ends_with(domain) && host.as_bytes()[host.len() - domain.len() - 1] == b'.')
}

/// At most one hit per list: the most specific matching rule.
pub fn match_blocklists(host: &str, lists: &[FilterList]) -> Vec<BlocklistHit> {
    let host = host.trim_end_matches('.').to_ascii_lowercase();
    lists
        .iter()
        .filter_map(|l| {
            l.rules
                .iter()
                .filter(|d| rule_hits(&host, d))
                .max_by_key(|d| d.len())
                .map(|d| BlocklistHit {
                    list_name: l.name.clone(),
                    rule: format!("||{d}^"),
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointEntity {
    /// Registrable domain of `host`.
    pub domain: String,
    pub host: String,
    pub ips: Vec<String>,
    pub company: Option<CompanyMatch>,
    /// Hosting data of the first IP; `None` when no IP is known.
    pub hosting: Option<IpMeta>,
    pub blocklist_hits: Vec<BlocklistHit>,
    pub request_count: usize,
    pub decrypted_requests: usize,
    /// Request body bytes.
    pub bytes_sent: u64,
    /// Capture-relative milliseconds.
    pub first_seen: i64,
    pub last_seen: i64,
    pub decrypted_share: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub total_requests: usize,
    pub total_domains: usize,
    pub total_entities: usize,
    pub total_companies: usize,
    pub sensitive_finding_count: usize,
    pub undecrypted_flow_count: usize,
    pub permissions_count: usize,
    pub trackers_count: usize,
}

impl SummaryMetrics {
    pub fn from_entities(entities: &[EndpointEntity]) -> Self {
        SummaryMetrics {
            total_requests: entities.iter().map(|e| e.request_count).sum(),
            total_domains: entities.iter().map(|e| &e.domain).collect::<BTreeSet<_>>().len(),
            total_entities: entities.len(),
            total_companies: entities
                .iter()
                .filter_map(|e| e.company.as_ref().map(|c| &c.name))
                .collect::<BTreeSet<_>>()
                .len(),
            ..Default::default()
        }
    }
}

pub struct EnrichmentInputs<'a> {
    pub transactions: &'a [HttpTransaction],
    /// Flows known only from handshake metadata (undecrypted, or decrypted
    /// but not HTTP/1.x).
    pub metadata_flows: &'a [&'a TlsFlowMeta],
    pub ip_meta: &'a BTreeMap<IpAddr, IpMeta>,
    pub company_db: &'a CompanyDb,
    pub lists: &'a [FilterList],
}

#[derive(Default)]
struct Acc {
    ips: BTreeSet<String>,
    requests: usize,
    decrypted: usize,
    bytes: u64,
    first: Option<i64>,
    last: Option<i64>,
}

impl Acc {
    fn seen(&mut self, t: i64) {
        self.first = Some(self.first.map_or(t, |f| f.min(t)));
        self.last = Some(self.last.map_or(t, |l| l.max(t)));
    }
}

/// Aggregates requests per host. Ordering: request_count descending, then host.
pub fn build_entities(inputs: &EnrichmentInputs) -> Vec<EndpointEntity> {
    let mut by_host: HashMap<String, Acc> = HashMap::new();
    for tx in inputs.transactions {
        let acc = by_host.entry(tx.host().to_ascii_lowercase()).or_default();
        acc.requests += 1;
        if tx.tls.as_ref().is_some_and(|t| t.decrypted) {
            acc.decrypted += 1;
        }
        acc.bytes += tx.request_body.bytes.len() as u64;
        if let Some(ip) = &tx.server_ip {
            acc.ips.insert(ip.clone());
        }
        acc.seen(tx.started_at);
    }
    for m in inputs.metadata_flows {
        let host = m.sni.clone().unwrap_or_else(|| m.server_ip.to_string()).to_ascii_lowercase();
        let acc = by_host.entry(host).or_default();
        acc.requests += 1;
        acc.ips.insert(m.server_ip.to_string());
        acc.seen(m.first_seen);
    }
    let psl = PublicSuffixList::bundled();
    let mut out: Vec<EndpointEntity> = by_host
        .into_iter()
        .map(|(host, acc)| {
            let ips: Vec<String> = acc.ips.into_iter().collect();
            let hosting = ips
                .iter()
                .filter_map(|ip| ip.parse::<IpAddr>().ok())
                .find_map(|ip| inputs.ip_meta.get(&ip).cloned());
            EndpointEntity {
                domain: psl.registrable_domain(&host),
                company: match_company(&host, inputs.company_db),
                blocklist_hits: match_blocklists(&host, inputs.lists),
                host,
                ips,
                hosting,
                request_count: acc.requests,
                decrypted_requests: acc.decrypted,
                bytes_sent: acc.bytes,
                first_seen: acc.first.unwrap_or(0),
                last_seen: acc.last.unwrap_or(0),
                decrypted_share: acc.decrypted as f64 / acc.requests as f64,
            }
        })
        .collect();
    out.sort_by(|a, b| b.request_count.cmp(&a.request_count).then_with(|| a.host.cmp(&b.host)));
    out
}

/// Every server IP mentioned by the inputs, for resolution.
pub fn collect_ips(transactions: &[HttpTransaction], metadata_flows: &[&TlsFlowMeta]) -> Vec<IpAddr> {
    let mut ips: BTreeSet<IpAddr> = transactions
        .iter()
        .filter_map(|t| t.server_ip.as_deref()?.parse().ok())
        .collect();
    ips.extend(metadata_flows.iter().map(|m| m.server_ip));
    ips.into_iter().collect()
}
