//! IP hosting lookups behind a cache. Lookups never fail the analysis: any
//! problem yields [`IpMeta::Unresolved`].

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_TTL_SECS: i64 = 30 * 24 * 3600;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostingRecord {
    pub org: Option<String>,
    pub country: Option<String>,
    pub city: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IpMeta {
    Resolved(HostingRecord),
    Unresolved { cause: String },
}

impl IpMeta {
    pub fn is_resolved(&self) -> bool {
        matches!(self, IpMeta::Resolved(_))
    }
}

pub trait WhoisProvider: Send + Sync {
    fn name(&self) -> &str;
    fn lookup(&self, ip: IpAddr) -> Result<HostingRecord, String>;
}

/// JSON-over-HTTP provider. `endpoint` contains `{ip}`; the response may use
/// either flat (`org`, `country_code`, `city`) or nested
/// (`connection.org`) fields, as returned by common IP whois services.
pub struct HttpWhoisProvider {
    pub endpoint: String,
    pub api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpWhoisProvider {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        HttpWhoisProvider {
            endpoint: endpoint.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

fn str_field(v: &serde_json::Value, keys: &[&str]) -> Option<String> {
    keys.iter()
        .find_map(|k| v.pointer(k).and_then(|x| x.as_str()))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

pub fn parse_whois_json(v: &serde_json::Value) -> Result<HostingRecord, String> {
    if v.get("success").and_then(|s| s.as_bool()) == Some(false) {
        return Err(str_field(v, &["/message"]).unwrap_or_else(|| "lookup rejected".into()));
    }
    Ok(HostingRecord {
        org: str_field(v, &["/org", "/connection/org", "/isp", "/connection/isp"]),
        country: str_field(v, &["/country_code", "/countryCode", "/country"]),
        city: str_field(v, &["/city"]),
    })
}

impl WhoisProvider for HttpWhoisProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn lookup(&self, ip: IpAddr) -> Result<HostingRecord, String> {
        let url = self.endpoint.replace("{ip}", &ip.to_string());
        let mut req = self.agent.get(&url);
        if let Some(k) = &self.api_key {
            req = req.query("key", k);
        }
        let body: serde_json::Value = req.call().map_err(|e| e.to_string())?.into_json().map_err(|e| e.to_string())?;
        parse_whois_json(&body)
    }
}

/// Fixed answers for tests and offline demos; counts lookups.
#[derive(Default)]
pub struct MockWhoisProvider {
    pub records: HashMap<IpAddr, HostingRecord>,
    pub calls: AtomicUsize,
}

impl MockWhoisProvider {
    pub fn new(records: impl IntoIterator<Item = (IpAddr, HostingRecord)>) -> Self {
        MockWhoisProvider {
            records: records.into_iter().collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl WhoisProvider for MockWhoisProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn lookup(&self, ip: IpAddr) -> Result<HostingRecord, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.records.get(&ip).cloned().ok_or_else(|| format!("no record for {ip}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    record: HostingRecord,
    /// Unix seconds.
    fetched_at: i64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    entries: BTreeMap<String, CacheEntry>,
}

/// Persistent cache of resolved records keyed by IP.
#[derive(Debug)]
pub struct WhoisCache {
    path: Option<PathBuf>,
    ttl_secs: i64,
    file: CacheFile,
}

impl WhoisCache {
    pub fn in_memory(ttl_secs: i64) -> Self {
        WhoisCache {
            path: None,
            ttl_secs,
            file: CacheFile::default(),
        }
    }

    /// Loads `path` if present; an unreadable cache is discarded.
    pub fn open(path: &Path, ttl_secs: i64) -> Self {
        let file = std::fs::read_to_string(path)
            .ok()
            .and_then(|t| match serde_json::from_str(&t) {
                Ok(f) => Some(f),
                Err(e) => {
                    log::warn!("discarding whois cache {}: {e}", path.display());
                    None
                }
            })
            .unwrap_or_default();
        WhoisCache {
            path: Some(path.to_path_buf()),
            ttl_secs,
            file,
        }
    }

    pub fn get(&self, ip: IpAddr, now: i64) -> Option<HostingRecord> {
        self.file
            .entries
            .get(&ip.to_string())
            .filter(|e| now - e.fetched_at < self.ttl_secs)
            .map(|e| e.record.clone())
    }

    pub fn put(&mut self, ip: IpAddr, record: HostingRecord, now: i64) {
        self.file.entries.insert(ip.to_string(), CacheEntry { record, fetched_at: now });
    }

    pub fn len(&self) -> usize {
        self.file.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.file.entries.is_empty()
    }

    pub fn save(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.file)?)?;
        std::fs::rename(tmp, path)
    }
}

pub struct Resolver {
    provider: Option<Arc<dyn WhoisProvider>>,
    offline: bool,
    cache: Mutex<WhoisCache>,
    max_in_flight: usize,
    clock: Box<dyn Fn() -> i64 + Send + Sync>,
}

impl Resolver {
    pub fn new(provider: Option<Arc<dyn WhoisProvider>>, offline: bool, cache: WhoisCache) -> Self {
        Resolver {
            provider,
            offline,
            cache: Mutex::new(cache),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            clock: Box::new(|| chrono::Utc::now().timestamp()),
        }
    }

    /// No provider and no cache: every IP is unresolved.
    pub fn offline() -> Self {
        Resolver::new(None, true, WhoisCache::in_memory(DEFAULT_TTL_SECS))
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_clock(mut self, clock: impl Fn() -> i64 + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn resolve_ip_meta(&self, ip: IpAddr) -> IpMeta {
        let now = (self.clock)();
        if let Some(r) = self.cache.lock().expect("cache lock").get(ip, now) {
            return IpMeta::Resolved(r);
        }
        if self.offline {
            return IpMeta::Unresolved { cause: "offline".into() };
        }
        let Some(provider) = &self.provider else {
            return IpMeta::Unresolved {
                cause: "no provider configured".into(),
            };
        };
        match provider.lookup(ip) {
            Ok(r) => {
                self.cache.lock().expect("cache lock").put(ip, r.clone(), now);
                IpMeta::Resolved(r)
            }
            Err(cause) => {
                log::info!("whois lookup for {ip} via {} failed: {cause}", provider.name());
                IpMeta::Unresolved { cause }
            }
        }
    }

    /// Resolves all `ips` with at most `max_in_flight` concurrent lookups,
    /// then persists the cache.
    pub fn resolve_all(&self, ips: &[IpAddr]) -> BTreeMap<IpAddr, IpMeta> {
        let queue = Mutex::new(ips.to_vec());
        let results = Mutex::new(BTreeMap::new());
        let workers = self.max_in_flight.min(ips.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let Some(ip) = queue.lock().expect("queue lock").pop() else { break };
                    let meta = self.resolve_ip_meta(ip);
                    results.lock().expect("results lock").insert(ip, meta);
                });
            }
        });
        if let Err(e) = self.cache.lock().expect("cache lock").save() {
            log::warn!("could not save whois cache: {e}");
        }
        results.into_inner().expect("results lock")
    }
}
