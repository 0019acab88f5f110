//! Typed forms of the JSON documents kept in the result store.

use serde::{Deserialize, Serialize};

use crate::capture::model::{FlowRecord, TlsFlowMeta, TrafficLog};
use crate::enrich::EndpointEntity;
use crate::package::{AppPackage, ContainedApk, ManifestModel, PermissionRecord, TrackerRecord};
use crate::sensitive::adapters::RuleMiss;
use crate::sensitive::SensitiveFinding;
use crate::session::device::{DeviceInfo, VideoMeta};
use crate::session::State;
use crate::store::{AppSummary, SCHEMA_VERSION};

fn version() -> String {
    SCHEMA_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestModelDoc {
    pub schema_version: String,
    pub app: AppSummary,
    pub manifest: ManifestModel,
    #[serde(default)]
    pub contained_apks: Vec<ContainedApk>,
    pub code_identifier_count: usize,
}

impl From<&AppPackage> for ManifestModelDoc {
    fn from(p: &AppPackage) -> Self {
        ManifestModelDoc {
            schema_version: version(),
            app: p.into(),
            manifest: p.manifest.clone(),
            contained_apks: p.contained_apks.clone(),
            code_identifier_count: p.code_identifiers.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermissionsDoc {
    pub schema_version: String,
    pub permissions: Vec<PermissionRecord>,
}

impl PermissionsDoc {
    pub fn new(permissions: Vec<PermissionRecord>) -> Self {
        PermissionsDoc {
            schema_version: version(),
            permissions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackersDoc {
    pub schema_version: String,
    pub tracker_db_version: String,
    pub trackers: Vec<TrackerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetaDoc {
    pub schema_version: String,
    pub base_time_ms: i64,
    pub flow_meta: Vec<TlsFlowMeta>,
    pub flows: Vec<FlowRecord>,
    pub udp_flows: usize,
}

impl From<&TrafficLog> for FlowMetaDoc {
    fn from(log: &TrafficLog) -> Self {
        FlowMetaDoc {
            schema_version: version(),
            base_time_ms: log.base_time_ms,
            flow_meta: log.flow_meta.clone(),
            flows: log.flows.clone(),
            udp_flows: log.udp_flows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingsDoc {
    pub schema_version: String,
    pub findings: Vec<SensitiveFinding>,
    pub rule_misses: Vec<RuleMiss>,
    /// Transactions whose decoding hit the output limit.
    pub output_limit_exceeded: Vec<String>,
}

impl FindingsDoc {
    pub fn new(findings: Vec<SensitiveFinding>, rule_misses: Vec<RuleMiss>, output_limit_exceeded: Vec<String>) -> Self {
        FindingsDoc {
            schema_version: version(),
            findings,
            rule_misses,
            output_limit_exceeded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitiesDoc {
    pub schema_version: String,
    pub entities: Vec<EndpointEntity>,
}

impl EntitiesDoc {
    pub fn new(entities: Vec<EndpointEntity>) -> Self {
        EntitiesDoc {
            schema_version: version(),
            entities,
        }
    }
}

/// Summary counts. `None` means the phase that produces the count did not run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub total_requests: Option<usize>,
    pub total_domains: Option<usize>,
    pub total_entities: Option<usize>,
    pub total_companies: Option<usize>,
    pub sensitive_finding_count: Option<usize>,
    pub undecrypted_flow_count: Option<usize>,
    pub permissions_count: Option<usize>,
    pub trackers_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub schema_version: String,
    pub metrics: Metrics,
    pub device: Option<DeviceInfo>,
    #[serde(default)]
    pub profile_labels: Vec<String>,
    pub video: Option<VideoMeta>,
    pub base_time_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Info,
    Warning,
    Error,
    State,
    Prompt,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: u64,
    pub at: String,
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<State>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogDoc {
    pub schema_version: String,
    pub events: Vec<LogEvent>,
}

impl LogDoc {
    pub fn new(events: Vec<LogEvent>) -> Self {
        LogDoc {
            schema_version: version(),
            events,
        }
    }
}
