use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderLimits;
use crate::enrich::whois::HostingRecord;
use crate::schema::{self, SchemaKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Physical,
    Emulator,
    Replay,
}

impl DeviceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Physical => "physical",
            DeviceKind::Emulator => "emulator",
            DeviceKind::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceChoice {
    pub kind: DeviceKind,
    /// Replay bundle directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serial: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordingMethod {
    Mitm,
    MitmPinningBypass,
    Ondevice,
    OndeviceKeylog,
}

impl RecordingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordingMethod::Mitm => "mitm",
            RecordingMethod::MitmPinningBypass => "mitm_pinning_bypass",
            RecordingMethod::Ondevice => "ondevice",
            RecordingMethod::OndeviceKeylog => "ondevice_keylog",
        }
    }

    /// mitm keys deliver HAR; on-device keys deliver a packet capture.
    pub fn expects_har(self) -> bool {
        matches!(self, RecordingMethod::Mitm | RecordingMethod::MitmPinningBypass)
    }

    pub fn uses_keylog(self) -> bool {
        self == RecordingMethod::OndeviceKeylog
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Http {
        endpoint: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
    },
    Mock {
        records: BTreeMap<IpAddr, HostingRecord>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichmentSettings {
    #[serde(default)]
    pub offline: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_id: Option<String>,
    pub title: String,
    #[serde(default)]
    pub annotations: String,
    pub app_ref: String,
    pub static_enabled: bool,
    pub dynamic_enabled: bool,
    pub device: DeviceChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording_method_key: Option<RecordingMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_limits: Option<DecoderLimits>,
    #[serde(default)]
    pub enrichment: EnrichmentSettings,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct InvalidConfig(pub String);

impl AnalysisConfig {
    pub fn from_json(text: &str) -> Result<Self, InvalidConfig> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| InvalidConfig(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, InvalidConfig> {
        schema::validate(SchemaKind::Config, &value)
            .map_err(|issues| InvalidConfig(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")))?;
        let cfg: AnalysisConfig = serde_json::from_value(value).map_err(|e| InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let bad = |m: &str| Err(InvalidConfig(m.to_string()));
        if crate::data::major_of(&self.schema_version) != Some(crate::data::SCHEMA_MAJOR) {
            return bad("unsupported schema_version");
        }
        if !self.static_enabled && !self.dynamic_enabled {
            return bad("at least one of static_enabled and dynamic_enabled must be true");
        }
        if self.dynamic_enabled != self.recording_method_key.is_some() {
            return bad("recording_method_key is required exactly when dynamic_enabled is true");
        }
        if self.app_ref.trim().is_empty() {
            return bad("app_ref is empty");
        }
        if let Some(id) = &self.analysis_id {
            if !crate::store::valid_id(id) {
                return bad("analysis_id may only contain letters, digits, '-' and '_' (max 64)");
            }
        }
        if let Some(l) = &self.decoder_limits {
            if !l.is_valid() {
                return bad("decoder limits must be positive");
            }
        }
        Ok(())
    }

    /// Replay sessions started by reference (REST) must name their bundle.
    pub fn require_fixture(&self) -> Result<(), InvalidConfig> {
        if self.dynamic_enabled && self.device.kind == DeviceKind::Replay && self.device.fixture.is_none() {
            return Err(InvalidConfig("replay device requires a fixture path".into()));
        }
        Ok(())
    }

    pub fn limits(&self) -> DecoderLimits {
        self.decoder_limits.unwrap_or_default()
    }
}
