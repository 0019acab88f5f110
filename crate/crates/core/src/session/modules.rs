//! Recording modules. Each module goes through setup, start, stop, cleanup
//! and postprocess exactly once; the session drives the order.

use serde::Serialize;

use super::config::RecordingMethod;
use super::device::{Device, DeviceError, RecordedScreen, RecordedTraffic};
use crate::capture::har::import_har;
use crate::capture::ingest::ingest_pcap;
use crate::capture::keylog::load_keylog;
use crate::capture::model::TrafficLog;
use crate::store::ArtifactKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Routine {
    Setup,
    Start,
    Stop,
    Cleanup,
    Postprocess,
}

impl Routine {
    pub fn as_str(self) -> &'static str {
        match self {
            Routine::Setup => "setup",
            Routine::Start => "start",
            Routine::Stop => "stop",
            Routine::Cleanup => "cleanup",
            Routine::Postprocess => "postprocess",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModuleError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Default)]
pub struct ModuleOutput {
    pub traffic: Option<TrafficLog>,
    pub video: Option<RecordedScreen>,
    pub sidecars: Vec<(ArtifactKind, Vec<u8>)>,
    /// Warnings worth surfacing in the session log.
    pub notes: Vec<String>,
}

pub trait RecordingModule: Send {
    fn key(&self) -> &str;
    fn setup(&mut self, device: &mut dyn Device) -> Result<(), ModuleError>;
    fn start(&mut self, device: &mut dyn Device) -> Result<(), ModuleError>;
    fn stop(&mut self, device: &mut dyn Device) -> Result<(), ModuleError>;
    fn cleanup(&mut self, device: &mut dyn Device) -> Result<(), ModuleError>;
    fn postprocess(&mut self, device: &mut dyn Device) -> Result<ModuleOutput, ModuleError>;
}

pub trait ModuleFactory: Send + Sync {
    fn screen(&self) -> Box<dyn RecordingModule>;
    /// Modules for a recording method, in start order.
    fn traffic(&self, method: RecordingMethod) -> Vec<Box<dyn RecordingModule>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultModuleFactory;

impl ModuleFactory for DefaultModuleFactory {
    fn screen(&self) -> Box<dyn RecordingModule> {
        Box::new(ScreenModule)
    }

    fn traffic(&self, method: RecordingMethod) -> Vec<Box<dyn RecordingModule>> {
        vec![Box::new(TrafficModule { method })]
    }
}

pub struct ScreenModule;

impl RecordingModule for ScreenModule {
    fn key(&self) -> &str {
        "screen"
    }

    fn setup(&mut self, device: &mut dyn Device) -> Result<(), ModuleError> {
        if !device.info().capabilities.screen_record {
            return Err(DeviceError::CapabilityMissing("screen recording").into());
        }
        Ok(())
    }

    fn start(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn stop(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn cleanup(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn postprocess(&mut self, device: &mut dyn Device) -> Result<ModuleOutput, ModuleError> {
        Ok(ModuleOutput {
            video: device.recorded_screen()?,
            ..Default::default()
        })
    }
}

/// Traffic capture. mitm keys yield HAR; on-device keys yield a pcap and,
/// for ondevice_keylog, the TLS key log.
pub struct TrafficModule {
    pub method: RecordingMethod,
}

impl RecordingModule for TrafficModule {
    fn key(&self) -> &str {
        self.method.as_str()
    }

    fn setup(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn start(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn stop(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn cleanup(&mut self, _device: &mut dyn Device) -> Result<(), ModuleError> {
        Ok(())
    }

    fn postprocess(&mut self, device: &mut dyn Device) -> Result<ModuleOutput, ModuleError> {
        let mut out = ModuleOutput::default();
        match device.recorded_traffic(self.method)? {
            RecordedTraffic::Har(bytes) => {
                let text = String::from_utf8(bytes).map_err(|_| ModuleError::Failed("HAR is not UTF-8".into()))?;
                let log = import_har(&text).map_err(|e| ModuleError::Failed(format!("HAR import: {e}")))?;
                out.traffic = Some(log);
            }
            RecordedTraffic::Pcap { pcap, keylog } => {
                let secrets = match &keylog {
                    Some(bytes) => {
                        let (secrets, stats) = load_keylog(&String::from_utf8_lossy(bytes));
                        if stats.skipped > 0 {
                            out.notes.push(format!("key log: {} malformed lines skipped", stats.skipped));
                        }
                        Some(secrets)
                    }
                    None => None,
                };
                let log = ingest_pcap(&pcap, secrets.as_ref()).map_err(|e| ModuleError::Failed(format!("capture: {e}")))?;
                out.traffic = Some(log);
                out.sidecars.push((ArtifactKind::Pcap, pcap));
                if let Some(k) = keylog {
                    out.sidecars.push((ArtifactKind::Keylog, k));
                }
            }
        }
        Ok(out)
    }
}
