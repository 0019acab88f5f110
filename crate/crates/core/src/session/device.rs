//! Device abstraction. The replay device serves a recorded fixture bundle
//! and is the reference implementation; physical and emulator devices need
//! an ADB bridge that this build does not ship.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DeviceChoice, DeviceKind, RecordingMethod};
use crate::schema::{self, SchemaKind};
use crate::sensitive::DeviceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub screen_record: bool,
    pub profile_extraction: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub kind: DeviceKind,
    pub identity: String,
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    /// Video start relative to the capture start. Negative when the video
    /// started first.
    pub start_offset_ms: i64,
    pub duration_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RecordedScreen {
    pub bytes: Vec<u8>,
    pub meta: VideoMeta,
}

#[derive(Debug, Clone)]
pub enum RecordedTraffic {
    Har(Vec<u8>),
    Pcap { pcap: Vec<u8>, keylog: Option<Vec<u8>> },
}

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error("no device available: {0}")]
    Unavailable(String),
    #[error("more than one device attached: {0}")]
    Multiple(String),
    #[error("device does not support {0}")]
    CapabilityMissing(&'static str),
    #[error("fixture bundle: {0}")]
    Bundle(String),
    #[error("device i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub trait Device: Send {
    fn info(&self) -> DeviceInfo;
    fn extract_profile(&mut self) -> Result<Option<DeviceProfile>, DeviceError>;
    /// Screen recording of the session, if the device can record.
    fn recorded_screen(&mut self) -> Result<Option<RecordedScreen>, DeviceError>;
    fn recorded_traffic(&mut self, method: RecordingMethod) -> Result<RecordedTraffic, DeviceError>;
    /// Undo session-specific device changes.
    fn restore(&mut self) -> Result<(), DeviceError>;
}

/// Lists devices matching a configuration choice.
pub trait DeviceProvider: Send + Sync {
    fn attached(&self, choice: &DeviceChoice) -> Result<Vec<Box<dyn Device>>, DeviceError>;
}

#[derive(Debug, Clone, Deserialize)]
struct BundleDevice {
    identity: String,
    capabilities: Capabilities,
}

#[derive(Debug, Clone, Deserialize)]
struct BundleVideo {
    file: String,
    start_offset_ms: i64,
    duration_ms: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
struct BundleManifest {
    fixture_id: String,
    device: BundleDevice,
    profile: Option<String>,
    pcap: Option<String>,
    keylog: Option<String>,
    har: Option<String>,
    video: Option<BundleVideo>,
}

/// A recorded session on disk: manifest.json plus the files it names.
#[derive(Debug, Clone)]
pub struct ReplayBundle {
    pub fixture_id: String,
    pub info: DeviceInfo,
    pub profile: Option<PathBuf>,
    pub pcap: Option<PathBuf>,
    pub keylog: Option<PathBuf>,
    pub har: Option<PathBuf>,
    pub video: Option<(PathBuf, VideoMeta)>,
}

impl ReplayBundle {
    pub fn load(dir: &Path) -> Result<ReplayBundle, DeviceError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| DeviceError::Bundle(format!("{}: {e}", dir.join("manifest.json").display())))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DeviceError::Bundle(e.to_string()))?;
        schema::validate(SchemaKind::FixtureBundle, &value)
            .map_err(|issues| DeviceError::Bundle(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")))?;
        let m: BundleManifest = serde_json::from_value(value).map_err(|e| DeviceError::Bundle(e.to_string()))?;
        let file = |name: &Option<String>| -> Result<Option<PathBuf>, DeviceError> {
            match name {
                None => Ok(None),
                Some(n) => {
                    let p = dir.join(n);
                    if !p.is_file() {
                        return Err(DeviceError::Bundle(format!("missing file {}", p.display())));
                    }
                    Ok(Some(p))
                }
            }
        };
        let video = match &m.video {
            None => None,
            Some(v) => file(&Some(v.file.clone()))?.map(|p| {
                (
                    p,
                    VideoMeta {
                        start_offset_ms: v.start_offset_ms,
                        duration_ms: v.duration_ms,
                    },
                )
            }),
        };
        Ok(ReplayBundle {
            fixture_id: m.fixture_id,
            info: DeviceInfo {
                kind: DeviceKind::Replay,
                identity: m.device.identity,
                capabilities: m.device.capabilities,
            },
            profile: file(&m.profile)?,
            pcap: file(&m.pcap)?,
            keylog: file(&m.keylog)?,
            har: file(&m.har)?,
            video,
        })
    }

    /// Ad-hoc bundle from loose files, as used by the command line.
    pub fn from_files(
        profile: Option<PathBuf>,
        pcap: Option<PathBuf>,
        keylog: Option<PathBuf>,
        har: Option<PathBuf>,
        video: Option<(PathBuf, VideoMeta)>,
    ) -> ReplayBundle {
        ReplayBundle {
            fixture_id: "adhoc".into(),
            info: DeviceInfo {
                kind: DeviceKind::Replay,
                identity: "replay:adhoc".into(),
                capabilities: Capabilities {
                    screen_record: video.is_some(),
                    profile_extraction: profile.is_some(),
                },
            },
            profile,
            pcap,
            keylog,
            har,
            video,
        }
    }
}

pub struct ReplayDevice {
    bundle: ReplayBundle,
}

impl ReplayDevice {
    pub fn new(bundle: ReplayBundle) -> Self {
        ReplayDevice { bundle }
    }
}

impl Device for ReplayDevice {
    fn info(&self) -> DeviceInfo {
        self.bundle.info.clone()
    }

    fn extract_profile(&mut self) -> Result<Option<DeviceProfile>, DeviceError> {
        if !self.bundle.info.capabilities.profile_extraction {
            return Err(DeviceError::CapabilityMissing("profile extraction"));
        }
        let Some(path) = &self.bundle.profile else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path)?;
        DeviceProfile::from_json(&text)
            .map(Some)
            .map_err(|e| DeviceError::Bundle(format!("profile: {e}")))
    }

    fn recorded_screen(&mut self) -> Result<Option<RecordedScreen>, DeviceError> {
        if !self.bundle.info.capabilities.screen_record {
            return Err(DeviceError::CapabilityMissing("screen recording"));
        }
        match &self.bundle.video {
            None => Ok(None),
            Some((path, meta)) => Ok(Some(RecordedScreen {
                bytes: std::fs::read(path)?,
                meta: *meta,
            })),
        }
    }

    fn recorded_traffic(&mut self, method: RecordingMethod) -> Result<RecordedTraffic, DeviceError> {
        if method.expects_har() {
            let path = self
                .bundle
                .har
                .as_ref()
                .ok_or_else(|| DeviceError::Bundle(format!("recording method {} needs a HAR file", method.as_str())))?;
            return Ok(RecordedTraffic::Har(std::fs::read(path)?));
        }
        let path = self
            .bundle
            .pcap
            .as_ref()
            .ok_or_else(|| DeviceError::Bundle(format!("recording method {} needs a capture file", method.as_str())))?;
        let keylog = match (&self.bundle.keylog, method.uses_keylog()) {
            (Some(k), true) => Some(std::fs::read(k)?),
            (None, true) => return Err(DeviceError::Bundle("ondevice_keylog needs a key log".into())),
            _ => None,
        };
        Ok(RecordedTraffic::Pcap {
            pcap: std::fs::read(path)?,
            keylog,
        })
    }

    fn restore(&mut self) -> Result<(), DeviceError> {
        Ok(())
    }
}

/// Default provider: replay bundles from the configured fixture path.
#[derive(Debug, Clone, Default)]
pub struct DefaultDeviceProvider;

impl DeviceProvider for DefaultDeviceProvider {
    fn attached(&self, choice: &DeviceChoice) -> Result<Vec<Box<dyn Device>>, DeviceError> {
        match choice.kind {
            DeviceKind::Replay => {
                let dir = choice
                    .fixture
                    .as_ref()
                    .ok_or_else(|| DeviceError::Unavailable("replay device without fixture path".into()))?;
                let bundle = ReplayBundle::load(dir).map_err(|e| DeviceError::Unavailable(e.to_string()))?;
                Ok(vec![Box::new(ReplayDevice::new(bundle))])
            }
            kind => Err(DeviceError::Unavailable(format!(
                "{} devices need an ADB bridge, which this build does not include",
                kind.as_str()
            ))),
        }
    }
}

/// Provider that hands out a prepared bundle, for in-process callers.
pub struct BundleProvider(pub ReplayBundle);

impl DeviceProvider for BundleProvider {
    fn attached(&self, _choice: &DeviceChoice) -> Result<Vec<Box<dyn Device>>, DeviceError> {
        Ok(vec![Box::new(ReplayDevice::new(self.0.clone()))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo")
    }

    #[test]
    fn demo_bundle_loads() {
        let b = ReplayBundle::load(&demo()).unwrap();
        assert_eq!(b.fixture_id, "demo-shop-1");
        assert!(b.pcap.is_some() && b.keylog.is_some() && b.har.is_none());
        assert_eq!(b.video.as_ref().unwrap().1.start_offset_ms, -1200);
        let mut d = ReplayDevice::new(b);
        assert!(d.extract_profile().unwrap().is_some());
        assert!(matches!(d.recorded_traffic(RecordingMethod::Mitm), Err(DeviceError::Bundle(_))));
        match d.recorded_traffic(RecordingMethod::OndeviceKeylog).unwrap() {
            RecordedTraffic::Pcap { keylog, .. } => assert!(keylog.is_some()),
            _ => panic!(),
        }
        match d.recorded_traffic(RecordingMethod::Ondevice).unwrap() {
            RecordedTraffic::Pcap { keylog, .. } => assert!(keylog.is_none()),
            _ => panic!(),
        }
    }

    #[test]
    fn physical_devices_unavailable() {
        let choice = DeviceChoice {
            kind: DeviceKind::Physical,
            fixture: None,
            serial: None,
        };
        assert!(matches!(DefaultDeviceProvider.attached(&choice), Err(DeviceError::Unavailable(_))));
    }
}
