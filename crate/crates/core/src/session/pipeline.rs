//! Analysis work that runs outside the recording lifecycle: static
//! inspection and traffic post-processing.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use super::config::{EnrichmentSettings, ProviderConfig};
use crate::capture::har::export_har_string;
use crate::capture::model::TrafficLog;
use crate::decoder::DecoderLimits;
use crate::documents::{EntitiesDoc, FindingsDoc, FlowMetaDoc, ManifestModelDoc, Metrics, PermissionsDoc, TrackersDoc};
use crate::enrich::whois::{HttpWhoisProvider, MockWhoisProvider, Resolver, WhoisCache, WhoisProvider, DEFAULT_TTL_SECS};
use crate::enrich::{build_entities, collect_ips, CompanyDb, EndpointEntity, EnrichmentInputs, FilterList, SummaryMetrics};
use crate::package::{analyze_static, AppPackage, PermissionCatalog, StaticReport, TrackerDb};
use crate::sensitive::adapters::{AdapterRegistry, RuleMiss};
use crate::sensitive::{analyze_transaction, compile_patterns, DeviceProfile, SensitiveFinding};
use crate::store::{ArtifactKind, Store, StoreError};

/// Reference data used by the analyses.
pub struct Resources {
    pub catalog: PermissionCatalog,
    pub trackers: TrackerDb,
    pub companies: CompanyDb,
    pub lists: Vec<FilterList>,
    pub adapters: AdapterRegistry,
}

impl Default for Resources {
    fn default() -> Self {
        Resources {
            catalog: PermissionCatalog::bundled(),
            trackers: TrackerDb::bundled(),
            companies: CompanyDb::bundled(),
            lists: vec![FilterList::bundled_example()],
            adapters: AdapterRegistry::bundled(),
        }
    }
}

/// Runs static analysis and stores the manifest model, permissions and
/// trackers documents.
pub fn run_static(store: &Store, id: &str, pkg: &AppPackage, res: &Resources) -> Result<StaticReport, StoreError> {
    let report = analyze_static(pkg, &res.catalog, &res.trackers);
    store.put_json(id, ArtifactKind::ManifestModel, &ManifestModelDoc::from(pkg))?;
    store.put_json(id, ArtifactKind::Permissions, &PermissionsDoc::new(report.permissions.clone()))?;
    store.put_json(
        id,
        ArtifactKind::Trackers,
        &TrackersDoc {
            schema_version: crate::store::SCHEMA_VERSION.into(),
            tracker_db_version: res.trackers.version.clone(),
            trackers: report.trackers.clone(),
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficFindings {
    pub findings: Vec<SensitiveFinding>,
    pub rule_misses: Vec<RuleMiss>,
    pub output_limit_exceeded: Vec<String>,
}

/// Pattern scan (when a profile is available) and adapters over every
/// decrypted transaction.
pub fn scan_traffic(
    log: &TrafficLog,
    profile: Option<&DeviceProfile>,
    adapters: &AdapterRegistry,
    limits: &DecoderLimits,
) -> TrafficFindings {
    let patterns = profile.and_then(|p| match compile_patterns(p) {
        Ok(set) => Some(set),
        Err(e) => {
            log::warn!("profile unusable for pattern matching: {e}");
            None
        }
    });
    let mut out = TrafficFindings::default();
    for tx in &log.transactions {
        let r = analyze_transaction(tx, patterns.as_ref(), adapters, limits);
        out.findings.extend(r.findings);
        out.rule_misses.extend(r.rule_misses);
        if r.output_limit_exceeded {
            out.output_limit_exceeded.push(tx.id.clone());
        }
    }
    out
}

pub fn enrich_traffic(log: &TrafficLog, resolver: &Resolver, res: &Resources) -> Vec<EndpointEntity> {
    let meta_flows = log.metadata_only_flows();
    let ip_meta = resolver.resolve_all(&collect_ips(&log.transactions, &meta_flows));
    build_entities(&EnrichmentInputs {
        transactions: &log.transactions,
        metadata_flows: &meta_flows,
        ip_meta: &ip_meta,
        company_db: &res.companies,
        lists: &res.lists,
    })
}

/// Builds the resolver for an analysis. The cache lives next to the store
/// so repeated analyses share lookups.
pub fn resolver_for(settings: &EnrichmentSettings, cache_dir: Option<&Path>) -> Resolver {
    if settings.offline {
        return Resolver::offline();
    }
    let cache = match cache_dir {
        Some(dir) => WhoisCache::open(&dir.join("whois-cache.json"), DEFAULT_TTL_SECS),
        None => WhoisCache::in_memory(DEFAULT_TTL_SECS),
    };
    let provider: Option<Arc<dyn WhoisProvider>> = match &settings.provider {
        None => None,
        Some(ProviderConfig::Http {
            endpoint,
            api_key,
            timeout_ms,
        }) => Some(Arc::new(HttpWhoisProvider::new(
            endpoint.clone(),
            api_key.clone(),
            Duration::from_millis(timeout_ms.unwrap_or(5000)),
        ))),
        Some(ProviderConfig::Mock { records }) => {
            // Mock lookups are deterministic; bypass the shared cache so
            // results depend on the configured records only.
            let mock = Arc::new(MockWhoisProvider::new(records.clone()));
            return Resolver::new(Some(mock), false, WhoisCache::in_memory(DEFAULT_TTL_SECS));
        }
    };
    Resolver::new(provider, false, cache)
}

pub struct DynamicOutcome {
    pub findings: TrafficFindings,
    pub entities: Vec<EndpointEntity>,
    pub metrics: Metrics,
}

/// Post-processing over the recorded traffic. Stores HAR, flow metadata,
/// findings and entities.
pub fn run_dynamic(
    store: &Store,
    id: &str,
    log: &TrafficLog,
    profile: Option<&DeviceProfile>,
    limits: &DecoderLimits,
    resolver: &Resolver,
    res: &Resources,
) -> Result<DynamicOutcome, StoreError> {
    store.put_artifact(id, ArtifactKind::Har, export_har_string(log).as_bytes())?;
    store.put_json(id, ArtifactKind::FlowMeta, &FlowMetaDoc::from(log))?;
    let findings = scan_traffic(log, profile, &res.adapters, limits);
    store.put_json(
        id,
        ArtifactKind::Findings,
        &FindingsDoc::new(
            findings.findings.clone(),
            findings.rule_misses.clone(),
            findings.output_limit_exceeded.clone(),
        ),
    )?;
    let entities = enrich_traffic(log, resolver, res);
    store.put_json(id, ArtifactKind::Entities, &EntitiesDoc::new(entities.clone()))?;
    let base = SummaryMetrics::from_entities(&entities);
    let metrics = Metrics {
        total_requests: Some(base.total_requests),
        total_domains: Some(base.total_domains),
        total_entities: Some(base.total_entities),
        total_companies: Some(base.total_companies),
        sensitive_finding_count: Some(findings.findings.len()),
        undecrypted_flow_count: Some(log.undecrypted_flows().count()),
        permissions_count: None,
        trackers_count: None,
    };
    Ok(DynamicOutcome {
        findings,
        entities,
        metrics,
    })
}
